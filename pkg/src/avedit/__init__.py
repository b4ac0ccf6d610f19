"""Audio-visual sound effect editing at desk scale: contrastive masked
audio-visual pretraining, correlation-gated conditioning, a flow-matching
multimodal diffusion-transformer editor, a synthetic benchmark, and a
metric suite."""

__version__ = "0.1.0"
