"""Latent KV-bank steering for decoder-only transformers, at desk scale."""
from .banks import BankSpec, ByteTokenizer, KVBank, build_bank, load_bank, save_bank, tokenize, wrap_descriptor
from .budget import BudgetInputs, BudgetReport, CacheSetup, budget_report, kv_bytes, kv_ratio
from .model import (
    DecodeState, Model, ModelConfig, StepTrace, decode_step, forward, generate, kv_project, load_model,
    new_state, prefill, save_model, synth_model,
)
from .numerics import RotaryOperator, logsumexp, rms_norm, softmax
from .plan import SteeringPlan
from .routing import (
    BankSlice, RoutingDiagnostics, RoutingGains, attend_augmented, attend_baseline, attend_mixture,
    attend_sidebank, caa_offset, memory_scores,
)
from .selector import (
    CalibrationTrace, SelectorArtifact, SelectorConfig, calibrate, expand_groups, load_artifact, save_artifact,
    score_units, select, trace_calibration,
)

__version__ = "0.1.0"
