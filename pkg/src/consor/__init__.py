"""Schema-organized rearrangement laboratory: symbolic scenes, procedural
datasets, a from-scratch encoder with triplet training, and baselines."""

__version__ = "0.1.0"
