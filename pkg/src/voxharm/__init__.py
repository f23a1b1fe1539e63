"""Two-stage diffusion harmonization of multi-site, multi-sequence 3D volumes.

Stage I trains a gradient-conditioned diffusion denoiser that aligns every
site's volumes into a per-sequence unified intensity domain tracked by EMA
style records.  Stage II fine-tunes a copy of that denoiser toward one chosen
target site using attention-pooled semantic style vectors.  A synthetic
traveling-subject phantom generator and a deterministic mock slice encoder
make every mechanism testable on a desk.
"""

__version__ = "0.1.0"
