import numpy as np
import pytest

from clora import numkit as nk
from clora.config import ExperimentConfig
from clora.lora import LifecycleError
from clora.workloads import classification as cls
from clora.workloads import diffusion as dif
from clora.workloads import ingest
from clora.workloads.tokens import TokenTable, compose_condition, init_concept_token


class TestConcepts:
    def test_tight_covariance(self):
        task = dif.ConceptTask(1, 0, [[1.5, -2.0]], 1e-6 * np.eye(2)[None], [1.0])
        x = dif.sample_concept(task, 500, 0)
        assert np.max(np.abs(x - [1.5, -2.0])) < 0.01

    def test_law_of_large_numbers(self):
        task = dif.make_concept(1, 7)
        x = dif.sample_concept(task, 100_000, 1)
        assert np.max(np.abs(x.mean(axis=0) - task.mean)) < 0.02

    def test_deterministic(self):
        task = dif.make_concept(2, 3)
        assert dif.sample_concept(task, 50, 9).tobytes() == dif.sample_concept(task, 50, 9).tobytes()

    def test_generated_mixtures(self):
        for t in dif.make_concept_sequence(5, 11):
            assert len(t.weights) in (2, 3)
            assert np.all(np.abs(t.means) <= 4.0)
            np.testing.assert_array_equal(t.covs[0], 0.2 * np.eye(2))

    def test_invalid_mixtures(self):
        with pytest.raises(ValueError):
            dif.ConceptTask(1, 0, [[0, 0]], np.eye(2)[None], [0.5])
        with pytest.raises(ValueError):
            dif.ConceptTask(1, 0, [[0, 0]], -np.eye(2)[None], [1.0])


class TestSchedule:
    def test_betas_and_products(self):
        for rescale in (True, False):
            s = dif.DiffusionSchedule(50, rescale=rescale)
            assert np.all((s.betas > 0) & (s.betas < 1))
            assert np.all(np.diff(s.alpha_bars) < 0)
        assert dif.DiffusionSchedule().alpha_bars[-1] < 1e-4

    def test_forward_noising_marginal(self):
        s = dif.DiffusionSchedule()
        u = 20
        x0 = np.array([[1.5, -0.7]])
        g = np.random.default_rng(0)
        eps = g.standard_normal((100_000, 2))
        xt = dif.q_sample(s, np.repeat(x0, 100_000, axis=0), np.full(100_000, u), eps)
        ab = s.alpha_bars[u]
        np.testing.assert_allclose(xt.mean(axis=0), np.sqrt(ab) * x0[0], rtol=0.02)
        np.testing.assert_allclose(np.cov(xt.T), (1 - ab) * np.eye(2), atol=0.02 * (1 - ab))


class OracleModel:
    """Returns the exact noise that produced ``x_t`` from the known batch."""

    def __init__(self, schedule, x0):
        self.schedule, self.x0 = schedule, x0

    def predict(self, x_t, u, cond, leaves=None):
        ab = self.schedule.alpha_bars[u][:, None]
        return (x_t - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab)


class ZeroModel:
    def predict(self, x_t, u, cond, leaves=None):
        return np.zeros_like(nk.value(x_t))


class TestDiffusionLoss:
    def test_oracle_model(self):
        s = dif.DiffusionSchedule()
        x0 = np.random.default_rng(0).normal(size=(64, 2))
        assert nk.scalar(dif.diffusion_loss(OracleModel(s, x0), s, x0, None, 1)) < 1e-20

    def test_zero_model(self):
        s = dif.DiffusionSchedule()
        x0 = np.random.default_rng(0).normal(size=(10_000, 2))
        assert abs(nk.scalar(dif.diffusion_loss(ZeroModel(), s, x0, None, 2)) - 1.0) < 0.05

    def test_deterministic(self):
        s = dif.DiffusionSchedule()
        model = dif.Denoiser(dif.init_backbone(0), s.steps)
        cond = np.random.default_rng(1).normal(size=(1, dif.D_C))
        x0 = np.random.default_rng(2).normal(size=(16, 2))
        a = nk.scalar(dif.diffusion_loss(model, s, x0, cond, 3))
        assert a == nk.scalar(dif.diffusion_loss(model, s, x0, cond, 3))

    def test_fixed_timesteps_shape(self):
        s = dif.DiffusionSchedule()
        with pytest.raises(nk.ShapeError):
            dif.diffusion_loss(ZeroModel(), s, np.zeros((4, 2)), None, 0, timesteps=np.zeros(3, dtype=int))

    def test_bad_batch(self):
        with pytest.raises(nk.ShapeError):
            dif.diffusion_loss(ZeroModel(), dif.DiffusionSchedule(), np.zeros((4, 3)), None, 0)


class TestSampler:
    def test_single_step_closed_form(self):
        s = dif.DiffusionSchedule(steps=1)
        out = dif.ddpm_sample(ZeroModel(), s, None, 10, 5, clip=None)
        z = np.random.default_rng(5).standard_normal((10, 2))
        # x_{-1} = (x - beta / sqrt(1 - ab) * 0) / sqrt(alpha), no noise at the last step
        np.testing.assert_allclose(out, z / np.sqrt(s.alphas[0]), rtol=1e-14)

    def test_unclipped_equals_epsilon_form(self):
        s = dif.DiffusionSchedule()
        model = dif.Denoiser(dif.init_backbone(3), s.steps)
        cond = np.random.default_rng(4).normal(size=(1, dif.D_C))
        g = np.random.default_rng(6)
        x = g.standard_normal((40, 2))
        for u in reversed(range(s.steps)):
            eps = nk.value(model.predict(x, np.full(40, u), cond))
            x = (x - s.betas[u] / np.sqrt(1 - s.alpha_bars[u]) * eps) / np.sqrt(s.alphas[u])
            if u > 0:
                x = x + np.sqrt(s.betas[u]) * g.standard_normal((40, 2))
        got = dif.ddpm_sample(model, s, cond, 40, 6, clip=None)
        np.testing.assert_allclose(got, x, rtol=1e-9, atol=1e-10)

    def test_same_seed_same_samples(self):
        s = dif.DiffusionSchedule()
        model = dif.Denoiser(dif.init_backbone(0), s.steps)
        cond = np.zeros((1, dif.D_C)) + 0.1
        assert dif.ddpm_sample(model, s, cond, 30, 1).tobytes() == dif.ddpm_sample(model, s, cond, 30, 1).tobytes()

    def test_clip_bounds_estimate(self):
        class Huge:
            def predict(self, x_t, u, cond, leaves=None):
                return -1e6 * np.ones_like(x_t)

        out = dif.ddpm_sample(Huge(), dif.DiffusionSchedule(steps=1), None, 5, 0)
        assert np.all(np.abs(out) <= dif.X0_CLIP * (1 + 1e-12))


class TestDenoiser:
    def test_adapter_gradients_match_finite_differences(self):
        s = dif.DiffusionSchedule()
        model = dif.Denoiser(dif.init_backbone(1), s.steps)
        g = np.random.default_rng(1)
        x0 = g.normal(size=(4, 2))
        point = {"tok": g.normal(0, 0.02, size=(1, dif.D_C))}
        for site in dif.SITES:
            point[site + ".A"] = g.normal(0, 0.1, size=(dif.D_C, 2))
            point[site + ".B"] = g.normal(0, 0.1, size=(2, dif.D_F))
        err = nk.finite_diff_check(lambda v: dif.diffusion_loss(model, s, x0, v["tok"], 0, v), point)
        assert err <= 1e-5

    def test_replace_dense_guarded_while_adapters_exist(self):
        from clora.lora import new_task_pair
        model = dif.Denoiser(dif.init_backbone(0), 50)
        new_task_pair(model.stacks["xattn.k"], 2, 0)
        with pytest.raises(RuntimeError):
            model.replace_dense({"attn.k": np.zeros((dif.D_C, dif.D_F))})


class TestTokens:
    def table(self):
        t = TokenTable(dif.D_C)
        t.embeddings[0] = np.random.default_rng(0).normal(size=(1, dif.D_C))
        t.freeze(0)
        return t

    def cosines(self, n=10_000):
        out = np.empty(n)
        for k in range(n):
            t = self.table()
            init_concept_token(t, 1, 2 * k)
            init_concept_token(t, 2, 2 * k + 1)
            a, b = t.get(1).ravel(), t.get(2).ravel()
            out[k] = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        return out

    # cos^2 of two isotropic 16-d vectors is Beta(1/2, 15/2), so
    # P(cos < 0.5) = 1 - I_{1/4}(1/2, 15/2) / 2 = 0.97952. The 0.99 target
    # cannot hold at d_c = 16; the check is kept as stated.
    @pytest.mark.xfail(strict=True, reason="P(cos < 0.5) is 0.9795 in 16 dimensions, below 0.99")
    def test_random_tokens_nearly_orthogonal(self):
        assert np.mean(self.cosines() < 0.5) >= 0.99

    def test_random_token_cosines_follow_isotropic_law(self):
        frac = np.mean(self.cosines() < 0.5)
        assert abs(frac - 0.97952) < 4 * np.sqrt(0.98 * 0.02 / 10_000)

    def test_word_init_tokens_start_close(self):
        t = self.table()
        init_concept_token(t, 1, 1, "word-init")
        init_concept_token(t, 2, 2, "word-init")
        assert np.linalg.norm(t.get(1) - t.get(2)) < 0.1

    def test_reinit_is_error(self):
        t = self.table()
        init_concept_token(t, 1, 0)
        with pytest.raises(LifecycleError):
            init_concept_token(t, 1, 0)

    def test_condition_rows(self):
        t = self.table()
        init_concept_token(t, 3, 0)
        assert compose_condition(t, 3).shape == (1, dif.D_C)
        two = compose_condition(t, 3, include_object=True)
        assert two.shape == (2, dif.D_C)
        np.testing.assert_array_equal(two[1], t.get(0)[0])

    def test_uninitialized(self):
        with pytest.raises(LifecycleError):
            compose_condition(self.table(), 4)

    def test_frozen_token_immutable(self):
        t = self.table()
        init_concept_token(t, 1, 0)
        t.freeze(1)
        with pytest.raises(LifecycleError):
            t.set(1, np.zeros(dif.D_C))
        with pytest.raises(ValueError):
            t.get(1)[0, 0] = 2.0


class TestClassificationTasks:
    def test_ids_distinct_and_disjoint(self):
        tasks = cls.make_classification_tasks(10, 2, seed=0)
        ids = [c for t in tasks for c in t.classes]
        assert len(ids) == 20 and len(set(ids)) == 20
        for t in tasks:
            assert set(np.unique(t.y_train)) == set(t.classes) == set(np.unique(t.y_test))

    def test_needs_two_tasks(self):
        with pytest.raises(ValueError):
            cls.make_classification_tasks(1, 2)

    def test_joint_linear_probe(self):
        sklearn = pytest.importorskip("sklearn.linear_model")
        radius = ExperimentConfig().class_radius
        tasks = cls.make_classification_tasks(10, 2, seed=0, radius=radius)
        x_tr = np.concatenate([t.x_train for t in tasks])
        y_tr = np.concatenate([t.y_train for t in tasks])
        x_te = np.concatenate([t.x_test for t in tasks])
        y_te = np.concatenate([t.y_test for t in tasks])
        probe = sklearn.LogisticRegression(max_iter=2000).fit(x_tr, y_tr)
        assert probe.score(x_te, y_te) >= 0.95

    def test_classifier_gradients(self):
        model = cls.Classifier(cls.init_backbone(0), cls.random_input_map(1))
        model.add_head(1, [0, 1, 2], 2)
        g = np.random.default_rng(3)
        x = g.normal(size=(3, cls.DIM))
        targets = np.array([0, 2, 1])
        point = {"head.w.1": model.head[1][0], "head.b.1": model.head[1][1]}
        for site in cls.SITES:
            point[site + ".A"] = g.normal(0, 0.1, size=(cls.D_MODEL, 2))
            point[site + ".B"] = g.normal(0, 0.1, size=(2, cls.D_MODEL))
        err = nk.finite_diff_check(lambda v: cls.cross_entropy(model.logits(x, [1], v), targets), point)
        assert err <= 1e-5

    def test_predict_spans_seen_heads(self):
        model = cls.Classifier(cls.init_backbone(0), cls.random_input_map(1))
        model.add_head(1, [0, 1], 0)
        model.add_head(2, [2, 3], 1)
        pred = model.predict(np.random.default_rng(0).normal(size=(50, cls.DIM)), [1, 2])
        assert set(pred) <= {0, 1, 2, 3}


class TestIngest:
    def test_concepts_in_order_of_appearance(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("x0,x1,concept_id\n1,2,b\n3,4,a\n5,6,b\n")
        out = ingest.load_concepts(p)
        assert [c.task_id for c in out] == [1, 2]
        np.testing.assert_array_equal(out[0].points, [[1, 2], [5, 6]])
        assert out[1].n_train == 1

    @pytest.mark.parametrize("text", ["", "a,b,c\n1,2,3\n", "x0,x1,concept_id\n", "x0,x1,concept_id\n1,2\n", "x0,x1,concept_id\n1,zz,a\n"])
    def test_bad_concept_files(self, tmp_path, text):
        p = tmp_path / "c.csv"
        p.write_text(text)
        with pytest.raises(ingest.IngestError):
            ingest.load_concepts(p)

    def write_classes(self, path, labels_tasks, seed=0):
        g = np.random.default_rng(seed)
        header = [f"f{i}" for i in range(cls.DIM)] + ["label", "task_id"]
        lines = [",".join(header)]
        for lab, tid in labels_tasks:
            lines.append(",".join(repr(float(v)) for v in g.normal(size=cls.DIM)) + f",{lab},{tid}")
        path.write_text("\n".join(lines) + "\n")

    def test_class_tasks_split(self, tmp_path):
        p = tmp_path / "k.csv"
        rows = [(lab, 1 + lab // 2) for lab in range(4) for _ in range(6)]
        self.write_classes(p, rows)
        tasks = ingest.load_class_tasks(p, seed=0)
        assert [t.classes for t in tasks] == [[0, 1], [2, 3]]
        assert all(len(t.y_train) == 6 and len(t.y_test) == 6 for t in tasks)
        again = ingest.load_class_tasks(p, seed=0)
        np.testing.assert_array_equal(tasks[0].x_train, again[0].x_train)

    @pytest.mark.parametrize("rows", [
        [(0, 1)] * 2 + [(0, 2)] * 2,  # class reused
        [(0, 1)] * 2 + [(2, 1)] * 2 + [(3, 2)] * 2,  # gap in task 1
        [(0, 1)] * 2 + [(1, 1)] * 2,  # single task
        [(0, 1)] * 1 + [(1, 2)] * 2,  # one row in a class
    ])
    def test_bad_class_files(self, tmp_path, rows):
        p = tmp_path / "k.csv"
        self.write_classes(p, rows)
        with pytest.raises(ingest.IngestError):
            ingest.load_class_tasks(p)
