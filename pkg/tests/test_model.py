import numpy as np
import pytest

from oracles import random_box
from pprfcn.data import DataConfig, WeakImage, WeakLabels, generate_dataset
from pprfcn.errors import FormatError
from pprfcn.geometry import Box
from pprfcn.model import PPRFCN, ModelConfig
from pprfcn.numerics import finite_difference_check
from pprfcn.train import TrainConfig, train


def tiny_image(seed=0, n=4, h=12, w=12, D=3):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(h, w, D)).astype(np.float32)
    boxes = [Box(*random_box(rng, h, w, 3)) for _ in range(n)]
    labels = WeakLabels(frozenset({0, 1}), frozenset({(0, 1, 1), (1, 0, 0)}))
    return WeakImage("tiny", feats, boxes, labels)


class TestEndToEndGradient:
    def test_total_loss(self):
        model = PPRFCN(ModelConfig(D=3, C=2, R=2, init_std=0.3, region_set_size=2, seed=4))
        image = tiny_image()
        for p in model.params():
            p.zero_grad()
        _, plan = model.image_loss(image, rng=np.random.default_rng(0), backward=True)

        def loss(_=None):
            return model.image_loss(image, plan=plan)[0].total

        rng = np.random.default_rng(1)
        for p in model.params():
            idx = rng.choice(p.size, size=min(p.size, 25), replace=False)
            assert finite_difference_check(loss, p, epsilon=1e-2, indices=idx) <= 1.0, p.name

    def test_bootstrap_only_leaves_wspp_untouched(self):
        model = PPRFCN(ModelConfig(D=3, C=2, R=2, init_std=0.3))
        for p in model.params():
            p.zero_grad()
        losses, _ = model.image_loss(tiny_image(), rng=np.random.default_rng(0), backward=True, with_wspp=False)
        assert losses.pred == 0.0
        assert all(not p.grad.any() for p in model.wspp.params())
        assert any(p.grad.any() for p in model.wsod.params())


class TestParameters:
    def test_linear_in_classes_and_predicates(self):
        def count(C, R):
            return PPRFCN(ModelConfig(D=8, C=C, R=R)).num_parameters()

        base = count(1, 1)
        dc, dr = count(2, 1) - base, count(1, 2) - base
        for C, R in [(5, 4), (50, 40)]:
            assert count(C, R) == base + (C - 1) * dc + (R - 1) * dr


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = PPRFCN(ModelConfig(D=3, C=2, R=2, init_std=0.3, seed=9))
        model.objectness_head = PPRFCN(ModelConfig(D=3, C=2, R=2, seed=10)).wsod
        model.save(tmp_path)
        back = PPRFCN.load(tmp_path)
        assert back.cfg == model.cfg
        image = tiny_image()
        np.testing.assert_array_equal(back.score_boxes(image.features, image.proposals).final,
                                      model.score_boxes(image.features, image.proposals).final)
        assert back.refine_proposals(image.features, image.proposals) == \
            model.refine_proposals(image.features, image.proposals)

    def test_missing_config(self, tmp_path):
        with pytest.raises(FormatError):
            PPRFCN.load(tmp_path)

    def test_shape_mismatch(self, tmp_path):
        PPRFCN(ModelConfig(D=3, C=2, R=2)).save(tmp_path / "a")
        PPRFCN(ModelConfig(D=3, C=2, R=3)).save(tmp_path / "b")
        victim = next((tmp_path / "a").glob("wspp.cls*.pprt"))
        victim.write_bytes((tmp_path / "b" / victim.name).read_bytes())
        with pytest.raises(FormatError, match="shape"):
            PPRFCN.load(tmp_path / "a")


@pytest.fixture(scope="module")
def images():
    ds = generate_dataset(DataConfig(num_train=8, num_test=0, seed=2, n_proposals=10))
    return [img.weak for img in ds.train]


class TestTrain:
    def test_history_and_refinement(self, images):
        model = PPRFCN(ModelConfig(D=16, C=5, R=4))
        history = train(model, images, TrainConfig(epochs=2, bootstrap_epochs=1))
        assert [(e.phase, e.epoch) for e in history] == [("bootstrap", 0), ("main", 0), ("main", 1)]
        assert history[0].pred == 0.0 and history[1].pred > 0.0
        assert model.objectness_head is not None
        assert all(np.isfinite(e.total) for e in history)

    def test_deterministic(self, images):
        runs = []
        for _ in range(2):
            model = PPRFCN(ModelConfig(D=16, C=5, R=4))
            train(model, images, TrainConfig(epochs=1, bootstrap_epochs=1))
            runs.append([p.value.tobytes() for p in model.params()])
        assert runs[0] == runs[1]
