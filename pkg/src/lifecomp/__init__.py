"""Lifelong learning of compositional model structures.

Library + CLI harness: shared components combined per task via linear
mixtures, soft layer ordering, or input-dependent gating; new tasks are
first assimilated (structure only), then accommodated into the shared
components via replay, Kronecker-factored weight consolidation, or plain
fine-tuning, with optional dynamic expansion of the component set.
"""

__version__ = "0.1.0"
