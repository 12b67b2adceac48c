"""Video frame prediction with disentangled content and motion features and an order-verifying sequence discriminator."""

__version__ = "0.1.0"
