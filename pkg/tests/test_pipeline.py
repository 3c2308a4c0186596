"""Pipeline tests: determinism, joint-loss additivity, the lambda_u = 0
degenerate case, teacher immutability, and the shared-transform hook."""

import numpy as np
import pytest

from semidet.data import gen_synthetic, split_protocol
from semidet.detector import PARAM_NAMES
from semidet.errors import ConfigError
from semidet.geometry import transform_box
from semidet.pipeline import (
    AUG_MODES,
    TrainConfig,
    ablate_grid,
    ablate_unlabeled_size,
    evaluate_model,
    loss_log_csv,
    run_stac,
    train_teacher,
)
from semidet.pseudolabel import generate_pseudo_labels


@pytest.fixture(scope="module")
def small_world():
    data = gen_synthetic(100, 24)
    split = split_protocol(data, 0.25, fold_seed=0)
    cfg = TrainConfig(steps=30, lr=0.05, seed=5, aug_mode="none")
    teacher = train_teacher(split.labeled, cfg).model
    return split, cfg, teacher


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(steps=0)
        with pytest.raises(ConfigError):
            TrainConfig(tau=1.5)
        with pytest.raises(ConfigError):
            TrainConfig(lambda_u=-1)
        with pytest.raises(ConfigError):
            TrainConfig(aug_mode="mixup")

    def test_modes_cover_table(self):
        assert AUG_MODES == ("none", "C", "C+{G,B}", "C+{G,B}+Cutout")


class TestTrainTeacher:
    def test_bit_identical_checkpoints(self, small_world):
        split, cfg, _ = small_world
        m1 = train_teacher(split.labeled, cfg).model
        m2 = train_teacher(split.labeled, cfg).model
        assert m1.fingerprint() == m2.fingerprint()

    def test_seed_changes_trajectory(self, small_world):
        split, cfg, teacher = small_world
        from dataclasses import replace

        other = train_teacher(split.labeled, replace(cfg, seed=6)).model
        assert other.fingerprint() != teacher.fingerprint()

    def test_strong_mode_changes_trajectory(self, small_world):
        split, cfg, teacher = small_world
        from dataclasses import replace

        aug = train_teacher(split.labeled, replace(cfg, aug_mode="C+{G,B}+Cutout")).model
        assert aug.fingerprint() != teacher.fingerprint()

    def test_loss_log_complete(self, small_world):
        split, cfg, _ = small_world
        res = train_teacher(split.labeled, cfg)
        assert [e.step for e in res.loss_log] == list(range(cfg.steps))
        assert all(e.l_u == 0.0 for e in res.loss_log)
        csv = loss_log_csv(res.loss_log)
        assert csv.splitlines()[0] == "step,l_s,l_u,total"
        assert len(csv.splitlines()) == cfg.steps + 1


class TestRunStac:
    def test_additivity_every_step(self, small_world):
        split, cfg, teacher = small_world
        from dataclasses import replace

        run_cfg = replace(cfg, lambda_u=2.0, tau=0.5, aug_mode="C+{G,B}+Cutout", steps=25)
        res = run_stac(split.labeled, split.unlabeled, teacher, run_cfg)
        for e in res.loss_log:
            assert abs(e.total - (e.l_s + run_cfg.lambda_u * e.l_u)) < 1e-9

    def test_teacher_never_modified(self, small_world):
        split, cfg, teacher = small_world
        before = teacher.fingerprint()
        from dataclasses import replace

        run_stac(
            split.labeled,
            split.unlabeled,
            teacher,
            replace(cfg, steps=10, tau=0.5, aug_mode="C+{G,B}+Cutout"),
        )
        assert teacher.fingerprint() == before

    def test_lambda_u_zero_matches_supervised(self, small_world):
        split, cfg, teacher = small_world
        from dataclasses import replace

        joint = run_stac(
            split.labeled, split.unlabeled, teacher, replace(cfg, lambda_u=0.0)
        ).model
        sup = train_teacher(split.labeled, cfg).model
        assert joint.fingerprint() == sup.fingerprint()

    def test_deterministic(self, small_world):
        split, cfg, teacher = small_world
        from dataclasses import replace

        run_cfg = replace(cfg, steps=12, tau=0.5, aug_mode="C")
        a = run_stac(split.labeled, split.unlabeled, teacher, run_cfg).model
        b = run_stac(split.labeled, split.unlabeled, teacher, run_cfg).model
        assert a.fingerprint() == b.fingerprint()

    def test_hook_sees_shared_transform(self, small_world):
        split, cfg, teacher = small_world
        from dataclasses import replace

        w, h = split.labeled[0].width, split.labeled[0].height
        calls = []

        def hook(matrix, before, after):
            calls.append((matrix, list(before), list(after)))

        run_cfg = replace(cfg, steps=20, tau=0.3, aug_mode="C+{G,B}+Cutout", lambda_u=1.0)
        run_stac(split.labeled, split.unlabeled, teacher, run_cfg, hook=hook)
        assert calls  # a geometric op fires with p ~ 0.5 per step
        for matrix, before, after in calls:
            expected = [
                tb for b in before if (tb := transform_box(matrix, b, w, h)) is not None
            ]
            assert after == expected

    def test_missing_pseudo_rejected(self, small_world):
        split, cfg, teacher = small_world
        pseudo = generate_pseudo_labels(teacher, split.unlabeled[:2], tau=0.9)
        with pytest.raises(ConfigError):
            run_stac(split.labeled, split.unlabeled, teacher, cfg, pseudo=pseudo)


class TestEvaluateModel:
    def test_returns_result(self, small_world):
        split, cfg, teacher = small_world
        res = evaluate_model(teacher, split.unlabeled[:8])
        assert 0.0 <= res.map <= 1.0
        assert 0.0 <= res.ap50 <= 1.0


class TestAblations:
    def test_grid_shape_and_determinism(self, small_world):
        split, cfg, teacher = small_world
        from dataclasses import replace

        run_cfg = replace(cfg, steps=6)
        cells = ablate_grid(
            split.labeled,
            split.unlabeled[:6],
            teacher,
            [0.5, 2.0],
            [0.3, 0.9],
            run_cfg,
            split.unlabeled[6:12],
        )
        assert len(cells) == 4
        assert {(c.lambda_u, c.tau) for c in cells} == {
            (0.5, 0.3),
            (2.0, 0.3),
            (0.5, 0.9),
            (2.0, 0.9),
        }
        again = ablate_grid(
            split.labeled,
            split.unlabeled[:6],
            teacher,
            [0.5, 2.0],
            [0.3, 0.9],
            run_cfg,
            split.unlabeled[6:12],
        )
        assert [(c.map, c.ap50) for c in cells] == [(c.map, c.ap50) for c in again]

    def test_single_cell_equals_run_stac(self, small_world):
        split, cfg, teacher = small_world
        from dataclasses import replace

        run_cfg = replace(cfg, steps=6)
        cells = ablate_grid(
            split.labeled,
            split.unlabeled[:6],
            teacher,
            [2.0],
            [0.9],
            run_cfg,
            split.unlabeled[6:12],
        )
        direct_cfg = replace(run_cfg, lambda_u=2.0, tau=0.9)
        direct = run_stac(split.labeled, split.unlabeled[:6], teacher, direct_cfg)
        res = evaluate_model(direct.model, split.unlabeled[6:12], run_cfg.nms_threshold)
        assert cells[0].map == res.map

    def test_unlabeled_size_clamps_with_warning(self, small_world):
        split, cfg, teacher = small_world
        from dataclasses import replace

        run_cfg = replace(cfg, steps=4)
        with pytest.warns(UserWarning, match="clamping"):
            cells = ablate_unlabeled_size(
                split.labeled,
                split.unlabeled,
                teacher,
                [1, 1000, "full"],
                run_cfg,
                split.unlabeled[:4],
            )
        assert cells[1].clamped
        assert cells[1].n_unlabeled == len(split.unlabeled)
        assert cells[2].multiplier == "full"
        assert not cells[2].clamped

    def test_unlabeled_subsets_nested(self, small_world):
        split, cfg, teacher = small_world
        from semidet.seeding import derive_rng

        order = derive_rng(cfg.seed, "unlabeled-subset").permutation(len(split.unlabeled))
        n_lab = len(split.labeled)
        prev: set = set()
        for mult in (1, 2, 3):
            cur = {split.unlabeled[i].id for i in order[: mult * n_lab]}
            assert prev <= cur
            prev = cur
