"""Voxel-guided natural image reconstruction: decode a coarse category from
measured voxel responses, sample a conditional generator, push candidates
through a trained visual encoding model, and rank them by calibrated
voxel-space error."""

__version__ = "0.1.0"
