"""Frame-level CTR prediction with a multimodal Perceiver/decoder network,
boundary-aware pairwise losses and DTW contrastive alignment."""

__version__ = "0.1.0"
