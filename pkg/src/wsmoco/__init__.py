"""Weight-supervised momentum contrast for edema estimation from facial images."""

__version__ = "0.1.0"
