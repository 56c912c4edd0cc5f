"""Small feature encoders producing the EHR and CXR node embeddings.

Both encoders are one-hidden-layer tanh MLPs.  The EHR encoder first collapses
the time axis to the per-feature mean of the zero-imputed values, concatenated
with the per-feature observed fraction.  Anything honoring
``input -> Tensor[d]`` on the tape can replace them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import DimensionError, Tensor, fan_in_uniform, tanh, zeros_param
from .records import CxrInput, EhrInput


@dataclass
class EncoderParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def named(self, prefix: str):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("W1", "b1", "W2", "b2")}


def init_encoder(rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int,
                 zero: bool = False) -> EncoderParams:
    if zero:
        return EncoderParams(zeros_param((in_dim, hidden)), zeros_param(hidden),
                             zeros_param((hidden, out_dim)), zeros_param(out_dim))
    return EncoderParams(
        fan_in_uniform(rng, (in_dim, hidden)), zeros_param(hidden),
        fan_in_uniform(rng, (hidden, out_dim)), zeros_param(out_dim),
    )


def mlp(x, params: EncoderParams) -> Tensor:
    """Rows of ``x`` (B x in) -> B x d."""
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
    if x.shape[-1] != params.in_dim:
        raise DimensionError(f"encoder expects {params.in_dim} input features, got shape {x.shape}")
    return tanh(x @ params.W1 + params.b1) @ params.W2 + params.b2


def ehr_summaries(inputs) -> np.ndarray:
    return np.stack([e.summary() for e in inputs])


def encode_ehr(ehr: EhrInput, params: EncoderParams) -> Tensor:
    if 2 * ehr.n_features != params.in_dim:
        raise DimensionError(
            f"EHR has {ehr.n_features} features; encoder configured for {params.in_dim // 2}")
    return mlp(ehr.summary()[None, :], params).reshape(-1)


def encode_cxr(cxr: CxrInput, params: EncoderParams) -> Tensor:
    if cxr.features.size != params.in_dim:
        raise DimensionError(
            f"CXR has {cxr.features.size} features; encoder configured for {params.in_dim}")
    return mlp(cxr.features[None, :], params).reshape(-1)
