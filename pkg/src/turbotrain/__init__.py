"""Two-stage (pretrain, then gradient-balanced fine-tuning) training for a
toy cooperative perception and prediction network on synthetic LiDAR scenes."""

__version__ = "0.1.0"
