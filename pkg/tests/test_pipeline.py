import json

import numpy as np
import pytest

import lcarep.pipeline as pl
from lcarep.backbone import BackboneConfig, Checkpoint, embed
from lcarep.dataio import NO_AUGMENT, ImageRecord, SyntheticSpec, gen_synthetic, load_images, write_manifest
from lcarep.errors import DatasetError, InvalidArgumentError, TrainingError
from lcarep.losses import LossConfig
from lcarep.pipeline import (
    PairSet,
    PseudolabelStore,
    TrainConfig,
    compose_student_batch,
    generate_pseudolabels,
    plan_student_epoch,
    train_student,
    train_teacher,
)

SMALL = BackboneConfig(input_size=16, block_channels=(4, 8))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    spec = SyntheticSpec(pair_classes=6, heldout_pair_classes=3, unlabeled_classes=6, unlabeled_per_class=2,
                         heldout_unlabeled_classes=2, probe_classes=3, probe_test_per_class=2, side=16)
    return gen_synthetic(spec, out)


def same_params(a: Checkpoint, b: Checkpoint) -> bool:
    return a.params.keys() == b.params.keys() and all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


class TestTrainConfig:
    def test_student_slots(self):
        assert TrainConfig(batch_size=32, pseudo_fraction=0.5).student_slots() == (8, 16)

    @pytest.mark.parametrize("kwargs", [{"batch_size": 30, "pseudo_fraction": 0.3}, {"pseudo_fraction": 0.0},
                                        {"pseudo_fraction": 1.0}, {"batch_size": 8, "pseudo_fraction": 0.75}])
    def test_bad_student_slots(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kwargs).student_slots()

    @pytest.mark.parametrize("kwargs", [{"batch_size": 7}, {"epochs": -1}, {"mining": "semi"}, {"momentum": 1.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kwargs)


class TestTeacher:
    def test_zero_epochs_is_seeded_init(self, corpus):
        ckpt, hist = train_teacher(PairSet.from_manifest(corpus["pairs"]), TrainConfig(epochs=0, seed=4), SMALL)
        assert hist == [] and same_params(ckpt, Checkpoint.initial(4, SMALL))

    def test_deterministic(self, corpus):
        pairs = PairSet.from_manifest(corpus["pairs"])
        cfg = TrainConfig(epochs=3, batch_size=8, seed=2)
        a, ha = train_teacher(pairs, cfg, SMALL)
        b, hb = train_teacher(pairs, cfg, SMALL)
        assert same_params(a, b)
        assert [h.mean_loss for h in ha] == [h.mean_loss for h in hb]

    def test_two_pair_toy_pulls_positives_together(self, corpus):
        pairs = PairSet.from_manifest(corpus["pairs"])
        toy = PairSet(pairs.images, pairs.index[:2], pairs.pair_ids[:2])
        cfg = TrainConfig(epochs=50, batch_size=4, learning_rate=0.05, augment=NO_AUGMENT)
        _, hist = train_teacher(toy, cfg, SMALL)
        assert hist[-1].mean_pos_dist < hist[0].mean_pos_dist

    def test_loss_decreases(self, corpus):
        pairs = PairSet.from_manifest(corpus["pairs"])
        _, hist = train_teacher(pairs, TrainConfig(epochs=40, batch_size=12), SMALL)
        assert np.mean([h.mean_loss for h in hist[-5:]]) < hist[0].mean_loss

    def test_metrics_file(self, corpus, tmp_path):
        train_teacher(PairSet.from_manifest(corpus["pairs"]), TrainConfig(epochs=2, batch_size=8), SMALL,
                      metrics_path=tmp_path / "metrics.jsonl")
        rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [0, 1]
        assert set(rows[0]) == {"epoch", "mean_loss", "mean_pos_dist", "mean_neg_dist", "wall_ms"}

    def test_nan_is_a_training_error(self, corpus, monkeypatch):
        monkeypatch.setattr(pl, "contrastive_batch", lambda emb, *a: (float("nan"), np.zeros_like(emb), [0.0], [0.0]))
        with pytest.raises(TrainingError, match="epoch 0, step 0"):
            train_teacher(PairSet.from_manifest(corpus["pairs"]), TrainConfig(epochs=1, batch_size=8), SMALL)

    def test_needs_two_pairs(self, corpus):
        pairs = PairSet.from_manifest(corpus["pairs"])
        with pytest.raises(DatasetError):
            train_teacher(PairSet(pairs.images, pairs.index[:1], pairs.pair_ids[:1]), TrainConfig(), SMALL)

    def test_unreadable_image(self, tmp_path):
        write_manifest(tmp_path / "p.jsonl", [ImageRecord("a", "a.ppm", pair_id=0), ImageRecord("b", "b.ppm", pair_id=0)])
        with pytest.raises(DatasetError, match="a.ppm"):
            PairSet.from_manifest(tmp_path / "p.jsonl")

    def test_random_mining_mode(self, corpus):
        _, hist = train_teacher(PairSet.from_manifest(corpus["pairs"]),
                                TrainConfig(epochs=1, batch_size=8, mining="random"), SMALL)
        assert np.isfinite(hist[0].mean_loss)


@pytest.fixture(scope="module")
def teacher(corpus):
    ckpt, _ = train_teacher(PairSet.from_manifest(corpus["pairs"]), TrainConfig(epochs=3, batch_size=8), SMALL)
    return ckpt


class TestPseudolabels:
    def test_store_contents(self, corpus, teacher):
        store = generate_pseudolabels(teacher, corpus["unlabeled"])
        images = load_images(corpus["unlabeled"])
        assert len(store) == len(images) == 12
        np.testing.assert_allclose(np.linalg.norm(store.vectors, axis=1), 1, atol=1e-5)
        for i, image_id in enumerate(store.ids):
            assert store[image_id].tobytes() == embed(images[i], teacher).tobytes()

    def test_regenerate_identical(self, corpus, teacher):
        a = generate_pseudolabels(teacher, corpus["unlabeled"])
        b = generate_pseudolabels(teacher, corpus["unlabeled"], threads=3)
        assert a.ids == b.ids and a.vectors.tobytes() == b.vectors.tobytes()

    def test_teacher_training_image(self, corpus, teacher):
        store = generate_pseudolabels(teacher, corpus["pairs"])
        images = load_images(corpus["pairs"])
        assert store[store.ids[0]].tobytes() == embed(images[0], teacher).tobytes()

    def test_round_trip(self, corpus, teacher, tmp_path):
        store = generate_pseudolabels(teacher, corpus["unlabeled"])
        store.save(tmp_path / "store")
        back = PseudolabelStore.load(tmp_path / "store")
        assert back.ids == store.ids and back.vectors.tobytes() == store.vectors.tobytes()
        lines = (tmp_path / "store" / "index.tsv").read_text().splitlines()
        assert lines[0] == f"{store.ids[0]}\t{store.ids[0]}.tnsr"

    def test_absent_id(self):
        store = PseudolabelStore(["a"], np.array([[1.0, 0.0]]))
        with pytest.raises(KeyError, match="'b'"):
            store["b"]

    def test_invariants(self):
        with pytest.raises(DatasetError):
            PseudolabelStore(["a", "a"], np.eye(2))
        with pytest.raises(DatasetError):
            PseudolabelStore(["a"], np.array([[2.0, 0.0]]))

    def test_corrupt_index(self, tmp_path):
        (tmp_path / "index.tsv").write_text("only-one-field\n")
        with pytest.raises(DatasetError, match="line 1"):
            PseudolabelStore.load(tmp_path)


class TestStudentBatch:
    def test_plan_half_and_half(self):
        cfg = TrainConfig(batch_size=32, pseudo_fraction=0.5)
        plan = plan_student_epoch(40, 100, cfg, np.random.default_rng(0), [])
        assert [len(p) for p, _ in plan] == [8] * 5
        assert all(len(q) == 16 for _, q in plan)
        assert sorted(np.concatenate([p for p, _ in plan])) == list(range(40))
        drawn = np.concatenate([q for _, q in plan])
        assert len(set(drawn.tolist())) == len(drawn)

    def test_plan_deterministic(self):
        cfg = TrainConfig()
        a = plan_student_epoch(40, 50, cfg, np.random.default_rng(3), [])
        b = plan_student_epoch(40, 50, cfg, np.random.default_rng(3), [])
        assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))

    def test_store_too_small(self):
        with pytest.raises(DatasetError):
            plan_student_epoch(40, 10, TrainConfig(), np.random.default_rng(0), [])

    def test_compose(self, corpus, teacher):
        pairs = PairSet.from_manifest(corpus["pairs"])
        unl = load_images(corpus["unlabeled"])
        store = generate_pseudolabels(teacher, corpus["unlabeled"])
        cfg = TrainConfig(batch_size=8, pseudo_fraction=0.5)
        x, ids, tgt = compose_student_batch(pairs, unl, store.vectors, np.array([0, 1]), np.array([3, 4, 5, 6]),
                                            cfg, np.random.default_rng(0))
        assert x.shape == (8, 16, 16, 3)
        assert ids.tolist() == [pairs.pair_ids[0]] * 2 + [pairs.pair_ids[1]] * 2
        assert tgt.tobytes() == store.vectors[[3, 4, 5, 6]].tobytes()


class TestStudent:
    def setup(self, corpus, teacher):
        pairs = PairSet.from_manifest(corpus["pairs"])
        unl = load_images(corpus["unlabeled"])
        store = generate_pseudolabels(teacher, corpus["unlabeled"])
        return pairs, unl, store

    def test_deterministic_and_fresh_init(self, corpus, teacher):
        pairs, unl, store = self.setup(corpus, teacher)
        cfg = TrainConfig(epochs=2, batch_size=8, seed=5)
        a, _ = train_student(pairs, unl, store, store.ids, cfg, SMALL)
        b, _ = train_student(pairs, unl, store, store.ids, cfg, SMALL)
        assert same_params(a, b)
        zero, _ = train_student(pairs, unl, store, store.ids, TrainConfig(epochs=0, seed=5), SMALL)
        assert same_params(zero, Checkpoint.initial(5, SMALL))

    def test_weight_one_ignores_pseudolabels(self, corpus, teacher):
        pairs, unl, store = self.setup(corpus, teacher)
        cfg = TrainConfig(epochs=2, batch_size=8, augment=NO_AUGMENT, loss=LossConfig(multitask_weight=1.0))
        a, _ = train_student(pairs, unl, store, store.ids, cfg, SMALL)
        scrambled = PseudolabelStore(store.ids, store.vectors[::-1])
        b, _ = train_student(pairs, unl, scrambled, store.ids, cfg, SMALL)
        assert same_params(a, b)

    def test_weight_one_matches_teacher_update(self, corpus):
        """With the pseudo term switched off, one student step equals a teacher step on the same pairs."""
        pairs = PairSet.from_manifest(corpus["pairs"])
        cfg = TrainConfig(batch_size=8, augment=NO_AUGMENT, loss=LossConfig(multitask_weight=1.0))
        ckpt = Checkpoint.initial(0, SMALL)
        idx = np.array([0, 1])
        unl = pairs.images[:4]
        x, ids, tgt = compose_student_batch(pairs, unl, np.zeros((4, 8), np.float32), idx, np.arange(4), cfg,
                                            np.random.default_rng(0))
        from lcarep.backbone import embed_backward, embed_forward
        from lcarep.losses import smooth_l1

        emb, state = embed_forward(x, ckpt)
        c_loss, c_grad, _, _ = pl._pair_terms(emb[:4], ids, cfg, None)
        _, s_grad = smooth_l1(emb[4:], tgt)
        student = embed_backward(ckpt, state, np.concatenate([1.0 * c_grad, 0.0 * s_grad]))
        emb_t, state_t = embed_forward(x[:4], ckpt)
        _, t_grad, _, _ = pl._pair_terms(emb_t, ids, cfg, None)
        teacher_g = embed_backward(ckpt, state_t, t_grad)
        for k in teacher_g:
            np.testing.assert_allclose(student[k], teacher_g[k], rtol=1e-5, atol=1e-7)

    def test_image_count_mismatch(self, corpus, teacher):
        pairs, unl, store = self.setup(corpus, teacher)
        with pytest.raises(InvalidArgumentError):
            train_student(pairs, unl[:3], store, store.ids, TrainConfig(epochs=1, batch_size=8), SMALL)


def test_separation_helper(corpus, teacher):
    pos, neg = pl.separation(teacher, PairSet.from_manifest(corpus["heldout_pairs"]))
    assert 0 <= pos <= 2 and 0 <= neg <= 2
