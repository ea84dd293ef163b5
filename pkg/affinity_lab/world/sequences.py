from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Tuple

import torch

from affinity_lab.utils.exceptions import LayoutError

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
NUM_RESIDUE_TYPES = len(ALPHABET)
LINKER_UNIT = "GGGGS"

# Members are ordered alphabetically; the str mixin gives the same total order.
ResidueType = Enum("ResidueType", [(code, code) for code in ALPHABET], type=str)

_INDEX = {code: i for i, code in enumerate(ALPHABET)}


def residue_index(code: str) -> int:
    return _INDEX[code]


@dataclass(frozen=True)
class Sequence:
    """An immutable residue string over the 20-letter alphabet."""

    residues: str

    def __post_init__(self):
        if len(self.residues) < 1:
            raise LayoutError("a sequence needs at least one residue")
        bad = [c for c in self.residues if c not in _INDEX]
        if bad:
            raise LayoutError(f"unknown residue code {bad[0]!r} in sequence")

    def __len__(self) -> int:
        return len(self.residues)

    def __str__(self) -> str:
        return self.residues

    def __getitem__(self, i: int) -> "ResidueType":
        return ResidueType(self.residues[i])

    @property
    def types(self) -> Tuple["ResidueType", ...]:
        return tuple(ResidueType(c) for c in self.residues)

    def encode(self) -> torch.LongTensor:
        return torch.tensor([_INDEX[c] for c in self.residues], dtype=torch.long)

    @classmethod
    def from_indices(cls, indices: Iterable[int]) -> "Sequence":
        return cls("".join(ALPHABET[int(i)] for i in indices))

    def mutate(self, changes: Dict[int, str]) -> "Sequence":
        chars = list(self.residues)
        for position, code in changes.items():
            if not 0 <= position < len(chars):
                raise LayoutError(
                    f"mutation position {position} outside sequence of length {len(chars)}"
                )
            chars[position] = code
        return Sequence("".join(chars))

    def hamming(self, other: "Sequence") -> int:
        if len(self) != len(other):
            raise LayoutError(
                f"hamming distance needs equal lengths, got {len(self)} and {len(other)}"
            )
        return sum(a != b for a, b in zip(self.residues, other.residues))


@dataclass(frozen=True)
class ComplexLayout:
    """
    Locates the antibody, GGGGS linker and antigen inside the concatenated complex.
    Global order is antibody ++ linker ++ antigen, so antibody-local and global indices coincide.
    """

    antibody: Sequence
    antigen: Sequence
    linker_repeat_count: int
    cdr_positions: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.linker_repeat_count < 0:
            raise LayoutError(
                f"linker_repeat_count must be non-negative, got {self.linker_repeat_count}"
            )
        for position in self.cdr_positions:
            if not 0 <= position < len(self.antibody):
                raise LayoutError(
                    f"CDR index {position} out of range for antibody of length {len(self.antibody)}"
                )
        if list(self.cdr_positions) != sorted(set(self.cdr_positions)):
            raise LayoutError("cdr_positions must be sorted and unique")

    @property
    def linker_length(self) -> int:
        return len(LINKER_UNIT) * self.linker_repeat_count

    @property
    def global_length(self) -> int:
        return len(self.antibody) + self.linker_length + len(self.antigen)

    @property
    def antibody_range(self) -> range:
        return range(0, len(self.antibody))

    @property
    def linker_range(self) -> range:
        start = len(self.antibody)
        return range(start, start + self.linker_length)

    @property
    def antigen_range(self) -> range:
        start = len(self.antibody) + self.linker_length
        return range(start, start + len(self.antigen))

    @property
    def cdr_global(self) -> Tuple[int, ...]:
        return tuple(self.cdr_positions)

    @property
    def antigen_global(self) -> Tuple[int, ...]:
        return tuple(self.antigen_range)

    def global_index(self, segment: str, local: int) -> int:
        ranges = {
            "antibody": self.antibody_range,
            "linker": self.linker_range,
            "antigen": self.antigen_range,
        }
        if segment not in ranges:
            raise LayoutError(f"unknown segment {segment!r}")
        span = ranges[segment]
        if not 0 <= local < len(span):
            raise LayoutError(
                f"{segment} index {local} out of range for length {len(span)}"
            )
        return span[local]

    def index_map(self) -> List[Tuple[str, int]]:
        """Global index -> (segment, local index), covering every global index once."""
        table = [("antibody", i) for i in self.antibody_range]
        table += [("linker", i) for i in range(self.linker_length)]
        table += [("antigen", i) for i in range(len(self.antigen))]
        return table

    def complex_sequence(self) -> Sequence:
        return Sequence(
            self.antibody.residues
            + LINKER_UNIT * self.linker_repeat_count
            + self.antigen.residues
        )

    def with_antibody(self, antibody: Sequence) -> "ComplexLayout":
        if len(antibody) != len(self.antibody):
            raise LayoutError(
                f"replacement antibody has length {len(antibody)}, expected {len(self.antibody)}"
            )
        return ComplexLayout(antibody, self.antigen, self.linker_repeat_count, self.cdr_positions)

    def with_antigen(self, antigen: Sequence) -> "ComplexLayout":
        return ComplexLayout(self.antibody, antigen, self.linker_repeat_count, self.cdr_positions)

    def cdr_mask(self, dtype=torch.float64) -> torch.Tensor:
        mask = torch.zeros(self.global_length, 1, dtype=dtype)
        mask[list(self.cdr_global)] = 1.0
        return mask


def make_complex(
    antibody: Sequence,
    antigen: Sequence,
    linker_repeats: int,
    cdr_positions: Iterable[int],
) -> Tuple[ComplexLayout, Sequence]:
    positions = list(cdr_positions)
    for position in positions:
        if not 0 <= position < len(antibody):
            raise LayoutError(
                f"CDR index {position} out of range for antibody of length {len(antibody)}"
            )
    layout = ComplexLayout(antibody, antigen, int(linker_repeats), tuple(sorted(set(positions))))
    return layout, layout.complex_sequence()
