"""Multimodal survival analysis toolkit.

Discrete-time and Cox proportional-hazards heads over fused text, covariate,
and gene-expression features, with teacher-distilled verbalized probabilities,
curve blending, and IPCW evaluation. Text enters as precomputed hidden states;
no language model is run by this package.
"""

__version__ = "0.1.0"
