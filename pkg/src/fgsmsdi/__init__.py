"""Fast adversarial training with a learnable, sample-dependent initialization.

A small numpy autodiff engine drives target classifiers, a generator that
proposes FGSM starting points, the FGSM / FGSM-RS / PGD baselines, training
loops, robustness evaluation and loss-landscape export.
"""

from .attacks import (
    DEFAULT_EPSILON,
    AttackConfig,
    NonFiniteLossError,
    evaluate_robust_accuracy,
    fgsm,
    fgsm_rs,
    grad_counter,
    pgd,
    project_linf,
)
from .data import Dataset, load_cifar_binary, synth_dataset
from .initializer import generate_init, generator_ascent_step, sdi_perturbation
from .landscape import export_landscape
from .metrics import MetricsRecord, read_metrics_csv, write_metrics_csv
from .models import (
    Architecture,
    GeneratorNet,
    TargetNet,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .optim import SGD
from .training import (
    ConfigError,
    TrainConfig,
    Trainer,
    monitor_overfit,
    select_best_checkpoint,
    train,
    train_fgsm_at,
    train_fgsm_rs,
    train_fgsm_sdi,
    train_pgd2_at,
    train_pgd4_at,
    train_pgd_at,
)

__version__ = "0.1.0"
