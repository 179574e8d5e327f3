"""Desk-scale laboratory for in-context learning in small transformers.

Modules: ``tensor`` (reverse-mode autodiff on numpy arrays), ``model``
(pre-norm transformer over packed prompts), ``tasks`` (synthetic task
families), ``construction`` (an attention stack that runs gradient descent),
``training``, ``analysis`` (scaling fits), and the sweep/report pipeline in
``sweep``, ``reports``, ``verify`` and ``cli``.
"""
from .analysis import (fit_context_exponent, fit_depth_width, fit_power_law, fit_sigmoid_emergence,
                       predict_alpha_theory, predict_critical_scale)
from .construction import build_constructed_stack, forward_constructed, measure_eta_eff
from .model import ModelConfig, TransformerModel, encode_context, forward, init_model
from .tasks import Episode, TaskSpec, sample_episode, sample_task
from .tensor import Tape, Tensor, backward
from .training import EvalConfig, RunRecord, TrainConfig, evaluate_icl, train_run

__version__ = "0.1.0"
