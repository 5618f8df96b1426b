"""Neurosymbolic diffusion models: masked diffusion over discrete concepts
with a symbolic program mapping concepts to outputs."""

from nesydm.diffusion import MASK, LinearSchedule, MaskedSeq, forward_mask, get_schedule, make_rng, reverse_posterior_sample
from nesydm.inference import VoteStrategy, estimate_marginals, predict_output, sample_concepts
from nesydm.model import Architecture, ModelParams, forward, init_params, load_checkpoint, sample, save_checkpoint
from nesydm.programs import AdditionProgram, CNFProgram, GridSpec, Program, ShortestPathProgram, XorProgram
from nesydm.training import LossWeights, TrainHyper, estimate_gradient, nelbo_value_estimate

__version__ = "0.1.0"

__all__ = [
    "MASK",
    "AdditionProgram",
    "Architecture",
    "CNFProgram",
    "GridSpec",
    "LinearSchedule",
    "LossWeights",
    "MaskedSeq",
    "ModelParams",
    "Program",
    "ShortestPathProgram",
    "TrainHyper",
    "VoteStrategy",
    "XorProgram",
    "estimate_gradient",
    "estimate_marginals",
    "forward",
    "forward_mask",
    "get_schedule",
    "init_params",
    "load_checkpoint",
    "make_rng",
    "nelbo_value_estimate",
    "predict_output",
    "reverse_posterior_sample",
    "sample",
    "sample_concepts",
    "save_checkpoint",
]
