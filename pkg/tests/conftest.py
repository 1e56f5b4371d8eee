"""Shared fixtures.

The crosstalk study fixtures are session-scoped because they carry the
expensive work (6000-frame training pass, 40,000-frame held-out stack);
the acceptance checks share one build.
"""

from __future__ import annotations

import time
from dataclasses import replace
from types import SimpleNamespace

import pytest
from hypothesis import settings

from mf_readout import (
    KINDS,
    TrainingData,
    apply_stats,
    crosstalk_config,
    default_config,
    evaluate,
    fit_stats,
    generate_dataset,
    generate_label_path,
    locate_sites,
    mean_image,
    split_dataset,
    train_all_sites,
)

settings.register_profile("suite", deadline=None, max_examples=25)
settings.load_profile("suite")


def build_training(stack, labels, split_seed: int):
    """One shuffle's pipeline stages: split, normalize, locate, package."""
    split = split_dataset(stack.n_images, seed=split_seed)
    stats = fit_stats(stack.images[split.train_idx])
    norm = apply_stats(stack.images, stats)
    geometry = locate_sites(mean_image(norm[split.train_idx]), stack.n_sites)
    data = TrainingData(
        train_images=norm[split.train_idx],
        train_labels=labels[split.train_idx],
        val_images=norm[split.val_idx],
        val_labels=labels[split.val_idx],
        geometry=geometry,
    )
    return split, stats, norm, geometry, data


@pytest.fixture(scope="session")
def small_stack():
    return generate_dataset(default_config(n_images=260, seed=11))


@pytest.fixture(scope="session")
def small_training(small_stack):
    split, stats, norm, geometry, data = build_training(small_stack, small_stack.truth, 0)
    return SimpleNamespace(
        stack=small_stack, split=split, stats=stats, norm=norm, geometry=geometry, data=data
    )


@pytest.fixture(scope="session")
def crosstalk_study():
    """Ten-shuffle training pass on the crosstalk-dominated dataset.

    Labels come from the second imaging path; every kind is tuned per
    shuffle and evaluated on that shuffle's test block.
    """
    t0 = time.perf_counter()
    config = crosstalk_config(seed=17)
    stack = generate_dataset(config)
    labels = generate_label_path(config, stack.truth)
    reports = {kind: [] for kind in KINDS}
    stats0 = sets0 = None
    for shuffle in range(10):
        split, stats, norm, geometry, data = build_training(stack, labels, shuffle)
        sets = {kind: train_all_sites(data, kind) for kind in KINDS}
        for kind in KINDS:
            base = None if kind == "gaussian" else sets["gaussian"]
            reports[kind].append(
                evaluate(sets[kind], norm[split.test_idx], labels[split.test_idx], base)
            )
        if shuffle == 0:
            stats0, sets0 = stats, sets
    return SimpleNamespace(
        config=config,
        truth=stack.truth,
        labels=labels,
        reports=reports,
        stats0=stats0,
        sets0=sets0,
        elapsed=time.perf_counter() - t0,
    )


@pytest.fixture(scope="session")
def crosstalk_holdout(crosstalk_study):
    """Fresh 40,000-frame stack scored with the shuffle-0 models."""
    t0 = time.perf_counter()
    sim = replace(crosstalk_study.config, n_images=40000, seed=901)
    stack = generate_dataset(sim)
    norm = apply_stats(stack.images, crosstalk_study.stats0)
    reports = {
        kind: evaluate(crosstalk_study.sets0[kind], norm, stack.truth)
        for kind in ("gaussian", "mf-array")
    }
    return SimpleNamespace(
        reports=reports, n_frames=stack.n_images, elapsed=time.perf_counter() - t0
    )
