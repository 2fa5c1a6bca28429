"""Analytic SIMD throughput: how many multiply-adds one instruction retires
for a given register width and accumulator width."""

from dataclasses import dataclass

from .kernels import ACC_WIDTHS


@dataclass(frozen=True)
class CostModel:
    register_width_bits: int = 128
    accumulator_bits: int = 32
    operand_bits: int = 8

    def __post_init__(self):
        if self.accumulator_bits not in ACC_WIDTHS:
            raise ValueError(f"accumulator_bits must be one of {ACC_WIDTHS}")
        if self.operand_bits < 1 or self.operand_bits > self.accumulator_bits:
            raise ValueError("operand_bits must be in [1, accumulator_bits]")
        if self.register_width_bits < self.accumulator_bits or self.register_width_bits % self.accumulator_bits:
            raise ValueError("register width must be a positive multiple of the accumulator width")

    @property
    def lanes(self) -> int:
        return self.register_width_bits // self.accumulator_bits

    @property
    def macs_per_instruction(self) -> int:
        return self.lanes


def compare(register_width_bits: int = 128, operand_bits: int = 8) -> dict:
    wide = CostModel(register_width_bits, 32, operand_bits)
    narrow = CostModel(register_width_bits, 16, operand_bits)
    return {
        "register_bits": register_width_bits,
        "operand_bits": operand_bits,
        "macs_per_instruction_acc32": wide.macs_per_instruction,
        "macs_per_instruction_acc16": narrow.macs_per_instruction,
        "ratio": narrow.macs_per_instruction / wide.macs_per_instruction,
    }
