import dataclasses
import math

import numpy as np
import pytest

from basis_transformer.ablations import (
    GAMMA_SWEEP,
    SMALL_TRAIN,
    NumericAblationConfig,
    SweepSetup,
    initial_bce_loss,
    run_blocks_ablation,
    run_gamma_ablation,
    run_numeric_ablation,
    two_scale_splits,
    write_rows,
)
from basis_transformer.model import BasisTransformer, ModelConfig
from basis_transformer.smr import SmrConfig

QUICK = SweepSetup(
    model=ModelConfig(dim=8, n_blocks=1, n_heads=2, n_basis=2, ratio=1, n_ctx_layers=0, mlp_ratio=1,
                      smr=SmrConfig(20, 4)),
    train=dataclasses.replace(SMALL_TRAIN, n_strides=1, stride_size=2, batch_size=8),
    seeds=(0,),
    n_rows=60,
)


def test_sweep_grids():
    assert GAMMA_SWEEP[0] == 0.0 and GAMMA_SWEEP[-1] == 0.5 and len(GAMMA_SWEEP) == 7


def test_numeric_ablation_shapes(tmp_path):
    res = run_numeric_ablation(NumericAblationConfig(seeds=(0, 1), epochs=3, n_numbers=100))
    assert set(res.curves) == {"smr", "ieee754", "scalar"}
    assert res.curves["smr"].shape == (2, 3)
    mean, se = res.final("scalar")
    assert math.isfinite(mean) and se >= 0
    path = write_rows(tmp_path / "c.csv", res.curve_rows())
    assert len(path.read_text().splitlines()) == 1 + 3 * 2 * 3


def test_gamma_and_block_sweeps_run():
    data = two_scale_splits(QUICK)
    rows, curves = run_gamma_ablation(QUICK, gammas=(0.0, 0.5), data=data)
    assert {r["gamma"] for r in rows} == {0.0, 0.5} and len(rows) == 4 and len(curves) == 4
    rows, _ = run_blocks_ablation(QUICK, blocks=(1, 2), data=data)
    params = {r["n_blocks"]: r["n_params"] for r in rows}
    assert params[2] > params[1]


def test_initial_loss_near_uniform():
    setup = QUICK
    model = BasisTransformer(setup.model, setup.text, seed=0)
    for d in two_scale_splits(setup):
        loss = initial_bce_loss(model, d.train.rows, d.train.y)
        assert loss == pytest.approx(setup.model.smr.width * np.log(2), rel=0.1)
