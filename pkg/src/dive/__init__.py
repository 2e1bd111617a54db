"""Synthetic infrared expansion for visible-infrared person re-identification.

A frozen text-conditioned denoiser learns one embedding per identity
(textual inversion) and low-rank cross-attention adapters keyed by
modality-view tokens.  Pairing an external identity token with an infrared
view token then renders that person as an infrared image.
"""

__version__ = "0.1.0"
