import time

import pytest

from msmda.data import NormalizationSpec, SynthConfig
from msmda.harness import (
    ExperimentConfig,
    run_ablation,
    run_baseline_source_combine,
    run_experiment,
)
from msmda.model import ModelConfig, TrainConfig

# Desk-scale transfer benchmark: 4 source domains, 3 classes, 600 samples per
# domain, moderate affine shift, 10 paired seeds. Normalization is off so the
# constructed domain shift reaches the model. Shared between the harness tests
# and the acceptance suite because the sweeps take about a minute.
BENCHMARK_SEEDS = tuple(range(10))
BENCHMARK_SYNTH = SynthConfig(
    num_domains=5,
    samples_per_domain=600,
    num_classes=3,
    feature_dim=16,
    class_separation=3.0,
    domain_shift_scale=1.5,
    noise_std=1.0,
    rng_seed=0,
)
BENCHMARK_CONFIG = ExperimentConfig(
    synth=BENCHMARK_SYNTH,
    norm=NormalizationSpec(kind="none"),
    model=ModelConfig(num_branches=1, cfe_dims=(32, 24, 16), dsfe_dim=8),
    train=TrainConfig(epochs=30, batch_size=128, lr=0.01),
    seeds=BENCHMARK_SEEDS,
)


def per_seed_results(summary):
    return {fr.seed: fr for fr in summary["_fold_results"]}


@pytest.fixture(scope="session")
def synthetic_benchmark():
    """Paired sweeps: full model, no-mmd ablation, no-disc ablation, baseline."""
    start = time.time()
    results = {
        "full": run_experiment(BENCHMARK_CONFIG),
        "no_mmd": run_ablation(BENCHMARK_CONFIG, "no_mmd"),
        "no_disc": run_ablation(BENCHMARK_CONFIG, "no_disc"),
        "baseline": run_baseline_source_combine(BENCHMARK_CONFIG),
    }
    results["elapsed_seconds"] = time.time() - start
    return results
