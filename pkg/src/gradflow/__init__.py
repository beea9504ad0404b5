"""Flow matching and gradual fine-tuning on low-dimensional synthetic data."""
from .coupling import CoupledBatch, couple, independent_coupling, ot_coupling_exact, ot_coupling_sinkhorn
from .distributions import DistributionSpec, ShiftSpec, make_shift_pair, sample
from .model import LoraAdapter, MlpParams, forward, lora_wrap, mlp_init
from .objectives import ObjectiveSpec, cfm_loss, gft_loss, optimal_drift
from .schedules import CoolingSchedule, beta_at, sweep_schedules

__version__ = "0.1.0"

__all__ = [
    "CoupledBatch", "couple", "independent_coupling", "ot_coupling_exact", "ot_coupling_sinkhorn",
    "DistributionSpec", "ShiftSpec", "make_shift_pair", "sample",
    "LoraAdapter", "MlpParams", "forward", "lora_wrap", "mlp_init",
    "ObjectiveSpec", "cfm_loss", "gft_loss", "optimal_drift",
    "CoolingSchedule", "beta_at", "sweep_schedules",
]
