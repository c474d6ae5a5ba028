from dataclasses import replace

import numpy as np
import pytest

from multipath import experiments as E
from multipath.config import profile
from multipath.network import ModelConfig
from multipath.trainer import TrainingSet


@pytest.fixture(scope="module")
def setup():
    run = profile("smoke")
    run = replace(run, train=replace(run.train, iterations=3),
                  data=replace(run.data, train_images=6, test_images=4))
    data = E.prepare_data(run)
    return run, data, E.TestImages(data.test), TrainingSet(data.train, data.train_proposals)


def test_splits_are_disjoint(setup):
    _, data, _, _ = setup
    assert not set(data.train.image_ids) & set(data.test.image_ids)
    assert min(data.test.image_ids) == E.TEST_FIRST_ID


def test_ablation_rows_and_cache_sharing(setup, tmp_path):
    run, data, images, ts = setup
    rows = E.ablation(run, data, images, tmp_path, ts)
    assert [(r["integral"], r["foveal"], r["skip"]) for r in rows] == [
        (0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 1, 1), (1, 1, 1)]
    assert len(list(tmp_path.glob("*.ckpt"))) == 6
    again = E.ablation(run, data, images, tmp_path, ts)
    assert again == rows
    # the trend's u50 and integral models are ablation rows 011 and 111
    E.integral_trend(run, data, images, tmp_path, ts)
    assert len(list(tmp_path.glob("*.ckpt"))) == 7


def test_ablation_is_deterministic_without_cache(setup, tmp_path):
    run, data, images, ts = setup
    short = replace(run, train=replace(run.train, iterations=2))
    a = E.ablation(short, data, images, tmp_path / "a", ts)
    b = E.ablation(short, data, images, tmp_path / "b", ts)
    assert a == b


def test_plain_row_is_fast_rcnn_configuration():
    cfg = ModelConfig.ablation(False, False, False)
    assert cfg.foveal_factors == (1.0,) and cfg.integral_thresholds == (50,)
    assert cfg.skip_wiring == ((16,),)


def test_cached_model_is_reloaded(setup, tmp_path):
    run, data, _, ts = setup
    a = E.train_cached(run, run.model, data, tmp_path, training_set=ts)
    b = E.train_cached(run, run.model, data, tmp_path, training_set=ts)
    assert all(np.array_equal(v, b.state_dict()[k]) for k, v in a.state_dict().items())
    assert len(list(tmp_path.glob("*.loss.csv"))) == 1
    key_a = E.training_key(run, run.model, run.train, run.seed)
    assert key_a != E.training_key(run, run.model, run.train, run.seed + 1)


def test_proposal_and_enhancement_tables(setup, tmp_path):
    run, data, images, ts = setup
    model = E.train_cached(run, run.model, data, tmp_path, training_set=ts)
    rows = E.proposals_trend(run, model, images, counts=(5, 20), qualities=(0.0, 1.0))
    assert [(r["series"], r["proposals"]) for r in rows] == [
        ("quality=0", 5), ("quality=0", 20), ("quality=1", 5), ("quality=1", 20)]
    other = E.train_cached(run, run.model, data, tmp_path, init_seed=run.seed + 1, training_set=ts)
    table = E.enhancements(run, [model, other], images, data.test_proposals)
    assert [r["setting"] for r in table] == ["baseline", "+hflip", "+fmp", "+hflip+fmp", "member1",
                                             "ensemble2"]
    E.write_rows(tmp_path / "t.csv", table)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "setting,ap,ap50"
