# The MIT License (MIT)
# Copyright © 2024 affinity_lab developers

# Permission is hereby granted, free of charge, to any person obtaining a copy of this software and associated
# documentation files (the “Software”), to deal in the Software without restriction, including without limitation
# the rights to use, copy, modify, merge, publish, distribute, sublicense, and/or sell copies of the Software,
# and to permit persons to whom the Software is furnished to do so, subject to the following conditions:

# The above copyright notice and this permission notice shall be included in all copies or substantial portions of
# the Software.

# THE SOFTWARE IS PROVIDED “AS IS”, WITHOUT WARRANTY OF ANY KIND, EXPRESS OR IMPLIED, INCLUDING BUT NOT LIMITED TO
# THE WARRANTIES OF MERCHANTABILITY, FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL
# THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER LIABILITY, WHETHER IN AN ACTION
# OF CONTRACT, TORT OR OTHERWISE, ARISING FROM, OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER
# DEALINGS IN THE SOFTWARE.

import math
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, confloat, conint, field_validator, model_validator


class _Record(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


def _finite(value: float) -> float:
    if not math.isfinite(value):
        raise ValueError(f"expected a finite value, got {value}")
    return value


class EnergyRecord(_Record):
    """
    One (antigen, antibody) complex of the dataset: the exact oracle energy and the simulated
    docking+scoring energy that the co-teaching stage learns from.
    """

    antigen_id: conint(ge=0)
    antibody_id: conint(ge=0)
    delta_g: float
    delta_g_noisy: float
    is_outlier: bool = False

    @field_validator("delta_g", "delta_g_noisy")
    @classmethod
    def check_finite(cls, value):
        return _finite(value)


class LabeledPair(_Record):
    antibody_id: conint(ge=0)
    antigen_id: conint(ge=0)
    delta_g: float

    @field_validator("delta_g")
    @classmethod
    def check_finite(cls, value):
        return _finite(value)


class PairwiseLabel(_Record):
    """
    ddg = dG(i, j) - dG(i, k) on noisy energies; y = 1 means antibody k binds more strongly.
    """

    antigen_id: conint(ge=0)
    antibody_j: conint(ge=0)
    antibody_k: conint(ge=0)
    ddg: float
    y: conint(ge=0, le=1)

    @field_validator("ddg")
    @classmethod
    def check_finite(cls, value):
        return _finite(value)

    @model_validator(mode="after")
    def check_label_matches_sign(self):
        if self.y != int(self.ddg > 0):
            raise ValueError(f"label {self.y} disagrees with ddg {self.ddg}")
        if self.antibody_j == self.antibody_k:
            raise ValueError("self-pairs carry no preference")
        return self

    def reversed(self) -> "PairwiseLabel":
        return PairwiseLabel(
            antigen_id=self.antigen_id,
            antibody_j=self.antibody_k,
            antibody_k=self.antibody_j,
            ddg=-self.ddg,
            y=int(-self.ddg > 0),
        )


class ConsensusReport(_Record):
    kept: List[PairwiseLabel]
    dropped: List[PairwiseLabel]
    agreement_rate: confloat(ge=0.0, le=1.0)


class DesignRecord(_Record):
    antigen_id: conint(ge=0)
    seed: int
    rank: conint(ge=0)
    sequence: str
    wildtype: str
    oracle_dg: float
    wildtype_dg: float
    seq_score: Optional[float] = None
    iteration: conint(ge=0) = 0
    mutation_path: str = ""
    is_fallback: bool = False

    @model_validator(mode="after")
    def check_same_length_as_wildtype(self):
        if len(self.sequence) != len(self.wildtype):
            raise ValueError(
                f"design length {len(self.sequence)} differs from wildtype length {len(self.wildtype)}"
            )
        return self


class AntigenMetrics(_Record):
    imp: confloat(ge=0.0, le=1.0)
    nat: confloat(gt=0.0, le=1.0)
    num_designs: conint(ge=0)


class MetricsReport(_Record):
    imp: confloat(ge=0.0, le=1.0)
    sim: Optional[confloat(ge=0.0, le=1.0)] = None
    nat: confloat(gt=0.0, le=1.0)
    per_antigen: Dict[int, AntigenMetrics] = {}
    nat_floored: bool = False
