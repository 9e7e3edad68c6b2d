"""Desk-scale safe planning stack: two-stage trajectory optimization
(mixed-integer warm start, nonlinear refinement) with temporal-logic rule
constraints, goal-recognition prediction, a perception error model, and a
deterministic closed-loop simulator."""

__version__ = "0.1.0"
