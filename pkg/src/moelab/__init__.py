"""moelab: a desk-scale laboratory for dense-to-MoE FFN conversion.

The package converts small dense FFN stacks into mixture-of-experts stacks
under strict structural/equivalence rules, trains them on synthetic
multi-task data with token-choice routing, emulates bfloat16 update
truncation on an exact grid, and records routing-utilization telemetry so
that the classic failure modes (deadlock, skew, rebound) can be reproduced
and classified deterministically.
"""

__version__ = "0.1.0"
