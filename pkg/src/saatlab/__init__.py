"""saatlab: a strength-adaptive adversarial training laboratory.

A compact tensor/autodiff engine, width-scalable classifiers, l-infinity
attack generators (FGSM, fixed-budget PGD, strength-adaptive PGD),
training loops spanning natural training through adversarial training
with adaptive per-example budgets, and a robustness evaluation harness
with a config-driven CLI.
"""

__version__ = "0.1.0"

from . import attacks, config, data, engine, evaluation, models, training  # noqa: F401
