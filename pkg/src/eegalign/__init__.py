"""EEG-image contrastive alignment at desk scale.

A self-contained training and evaluation pipeline that aligns EEG
recordings with paired images: a learnable elementwise EEG perturbation
feeding a linear encoder on one side, and on the other a frozen vision
transformer whose patch tokens are modulated by instance-conditioned
dynamic filters, fused by gated cross-attention, and steered by a small
set of trainable prompt tokens. Training minimizes a weighted sum of a
symmetric InfoNCE term, a softened-target distribution matching term,
and an off-diagonal relation matching term; evaluation is zero-shot
retrieval on held-out classes.
"""

__version__ = "0.1.0"
