"""In-session personalized query auto-completion.

Noisy-channel candidate retrieval from a prefix index, re-ranked with
session vectors pooled from reduced product-image features.
"""

__version__ = "0.1.0"
