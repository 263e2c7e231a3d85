"""Torch networks: deformable alignment, attention, fusion, U-Nets and the full denoiser."""
