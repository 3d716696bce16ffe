"""The full patch network: encoder -> HV-BiLSTM refiner -> softmax classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .head import classify
from .hv_bilstm import HvBilstmConfig, init_hv_bilstm, refine_values
from .numerics.tensor import Tensor
from .vit_encoder import EncoderConfig, Params, encode_patches, init_encoder, uniform_weight


@dataclass
class ModelSpec:
    encoder: EncoderConfig
    lstm: HvBilstmConfig
    n_classes: int  # including background
    rows: int
    cols: int
    patch_dim: int

    @property
    def s(self) -> int:
        return self.rows * self.cols


@dataclass
class Forward:
    f_in: Tensor  # (batch, s, e)
    f_out: Tensor  # (batch, s, e)
    z: Tensor  # (batch, s, C)


class TKPModel:
    def __init__(self, spec: ModelSpec, params: Params):
        self.spec = spec
        self.params = params

    @classmethod
    def initialize(cls, spec: ModelSpec, head_seed: int = 0) -> "TKPModel":
        if spec.lstm.e != spec.encoder.e:
            raise ValueError(f"refiner width {spec.lstm.e} != encoder width {spec.encoder.e}")
        params = init_encoder(spec.encoder, spec.patch_dim, spec.s)
        params.update(init_hv_bilstm(spec.lstm))
        rng = np.random.default_rng([head_seed, 303])
        params["head.w"] = uniform_weight(rng, spec.encoder.e, (spec.encoder.e, spec.n_classes), "head.w")
        return cls(spec, params)

    def parameter_list(self, skip_prefix: tuple[str, ...] = ()) -> list[Tensor]:
        return [p for name, p in self.params.items() if not name.startswith(skip_prefix)]

    def forward(self, patches: np.ndarray | Tensor) -> Forward:
        x = patches if isinstance(patches, Tensor) else Tensor(patches)
        f_in = encode_patches(x, self.params, self.spec.encoder)
        f_out = refine_values(f_in, self.spec.rows, self.spec.cols, self.params, self.spec.lstm)
        z = classify(f_out, self.params["head.w"]).z
        return Forward(f_in=f_in, f_out=f_out, z=z)
