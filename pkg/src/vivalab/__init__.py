"""Instruction-based video editing lab on a synthetic shape world.

The stack: a seeded tensor/autodiff engine, a procedural paired-data world
with oracle masks and a closed caption grammar, a small velocity-field
transformer trained with a masked rectified-flow loss, and a group-relative
reward post-training stage driven by deterministic reward oracles.
"""

__version__ = "0.1.0"
