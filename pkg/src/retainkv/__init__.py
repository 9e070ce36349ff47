"""Retention-gated attention with a single global KV budget over a paged cache."""

from .attention import HeadCache, UsefulSet, attend_evicted, attend_full, attend_retained, dilution
from .backbone import Backbone, random_backbone, student_backward, student_forward, teacher_forward
from .eviction import (
    EvictionConfig,
    EvictionPolicy,
    EvictionScore,
    evict_global,
    global_score,
    global_score_infinite,
)
from .gates import (
    GateParams,
    ModelShape,
    cap_loss_global,
    cap_loss_per_head,
    gate_forward,
    init_gate_params,
    load_gates,
    quality_loss,
    save_gates,
    total_loss,
)
from .numerics import EmptySupportError, finite_diff_grad, sigmoid, softmax, softmax_log_space
from .paged_cache import CacheCapacityError, PagedKVStore
from .tasks import TaskSpec, build_task_model, default_shape, generate_dataset, generate_sample
from .theory import (
    DilutionInstance,
    PersistenceConfig,
    StabilityError,
    SurvivalRecord,
    check_reweighting_identity,
    check_dilution_bound,
    dilution_lower_bound,
    fit_var1,
    retention_dilution,
    simulate_persistence,
    survival_curve,
)
from .training import DivergenceError, loss_and_grads, train_gates

__version__ = "0.1.0"
