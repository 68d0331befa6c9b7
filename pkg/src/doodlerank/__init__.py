"""Zero-shot sketch-based image retrieval at desk scale.

Dual attention-equipped encoders trained with a triplet ranking loss, a
gradient-reversal domain-adversarial loss, and a semantic word-vector
reconstruction loss; plus zero-shot split management, an exact L2
retrieval scanner, and mAP / mAP@K / P@K evaluation.
"""

__version__ = "0.1.0"
