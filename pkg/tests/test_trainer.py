"""Trainer tests: SGD arithmetic, digests, caching, sequencing, determinism."""

import numpy as np
import pytest

from regionsim import autograd as ag
from regionsim import checkpoint as ck
from regionsim import trainer
from regionsim.config import RunConfig
from regionsim.errors import SequencingError, ShapeError
from regionsim.model import init_model
from regionsim.seeding import derive_rng
from regionsim.supervision import format_record
from regionsim.synthcity import WorldSpec, generate_dataset


@pytest.fixture(scope="module")
def small_ds():
    spec = WorldSpec(
        seed=3,
        length_m=120.0,
        n_train_queries=8,
        n_train_gallery=48,
        n_test_queries=8,
        n_test_gallery=48,
    )
    return generate_dataset(spec)


@pytest.fixture(scope="module")
def small_cfg():
    return RunConfig.create(
        generations=2, epochs=1, k_positives=5, seed=0, workers=1, eval_out_dim=32
    )


@pytest.fixture(scope="module")
def small_run(small_ds, small_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    result = trainer.run_pipeline(small_ds, small_cfg, out_dir=str(out))
    return result, out


class TestSgdStep:
    def make_param(self, value):
        return ag.parameter(np.asarray(value, dtype=np.float64))

    def test_hand_evaluated_update(self):
        p = self.make_param([1.0])
        p.grad[:] = 1.0
        v = [np.zeros(1)]
        trainer.sgd_step([p], v, lr=0.001, momentum=0.9, weight_decay=0.001)
        assert v[0][0] == 1.001
        assert p.data[0] == 0.998999

    def test_zero_grad_zero_velocity_no_change(self):
        p = self.make_param([0.5, -2.0])
        v = [np.zeros(2)]
        trainer.sgd_step([p], v, lr=0.1, momentum=0.9, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [0.5, -2.0])
        np.testing.assert_array_equal(v[0], 0.0)

    def test_frozen_param_untouched(self):
        p = self.make_param([1.0, 1.0])
        p.grad[:] = 5.0
        p.requires_grad = False
        v = [np.full(2, 3.0)]
        trainer.sgd_step([p], v, lr=0.1, momentum=0.9, weight_decay=0.01)
        np.testing.assert_array_equal(p.data, [1.0, 1.0])
        np.testing.assert_array_equal(v[0], 3.0)  # momentum state also frozen

    def test_momentum_accumulates(self):
        p = self.make_param([0.0])
        v = [np.array([2.0])]
        p.grad[:] = 0.0
        trainer.sgd_step([p], v, lr=1.0, momentum=0.5, weight_decay=0.0)
        assert v[0][0] == 1.0
        assert p.data[0] == -1.0

    def test_shape_mismatch_rejected(self):
        p = self.make_param([1.0, 2.0])
        with pytest.raises(ShapeError):
            trainer.sgd_step([p], [np.zeros(3)], 0.1, 0.9, 0.0)
        with pytest.raises(ShapeError):
            trainer.sgd_step([p], [], 0.1, 0.9, 0.0)


class TestDigests:
    def sample_model(self, seed=0):
        rng = derive_rng(seed, "digest-images")
        return init_model(seed, [rng.uniform(0, 1, (32, 96)) for _ in range(4)])

    def test_params_digest_reproducible(self):
        a = self.sample_model(1)
        b = self.sample_model(1)
        assert trainer.params_digest(a) == trainer.params_digest(b)

    def test_params_digest_sees_changes(self):
        m = self.sample_model(1)
        before = trainer.params_digest(m)
        m.encoder.biases[0].data[0] += 1e-9
        assert trainer.params_digest(m) != before

    def test_quantize_checkpoint_matches_f4_round_trip(self):
        m = self.sample_model(2)
        vels = [np.random.default_rng(0).normal(size=p.data.shape) for p in m.parameters()]
        ckpt = ck.from_model(m, vels, 1, 5, 2, "aa")
        q = trainer.quantize_checkpoint(ckpt)
        for (_, a), (_, b) in zip(ckpt.tensors, q.tensors):
            np.testing.assert_array_equal(b, a.astype("<f4").astype(np.float64))
        # idempotent: a second rounding changes nothing
        q2 = trainer.quantize_checkpoint(q)
        for (_, a), (_, b) in zip(q.tensors, q2.tensors):
            np.testing.assert_array_equal(a, b)


class TestEncodeImages:
    def test_worker_count_never_changes_results(self, small_ds):
        rng = derive_rng(0, "enc-images")
        model = init_model(0, [rng.uniform(0, 1, (32, 96)) for _ in range(4)])
        images = small_ds.split("train-gallery")[:12]
        fms1, descs1 = trainer.encode_images(model, images, workers=1)
        fms4, descs4 = trainer.encode_images(model, images, workers=4)
        np.testing.assert_array_equal(descs1, descs4)
        for a, b in zip(fms1, fms4):
            np.testing.assert_array_equal(a, b)

    def test_rows_follow_input_order(self, small_ds):
        rng = derive_rng(1, "enc-images")
        model = init_model(1, [rng.uniform(0, 1, (32, 96)) for _ in range(4)])
        images = small_ds.split("train-gallery")[:6]
        _, descs = trainer.encode_images(model, images, workers=3)
        from regionsim.model import image_descriptor_array

        for i, img in enumerate(images):
            np.testing.assert_array_equal(descs[i], image_descriptor_array(model, img.pixels))


class TestGenerationTargets:
    def frozen(self, small_ds, seed=0):
        gallery = small_ds.split("train-gallery")
        return init_model(seed, [img.pixels for img in gallery[:8]])

    def test_positives_and_records_aligned(self, small_ds, small_cfg):
        model = self.frozen(small_ds)
        t = trainer.compute_generation_targets(model, small_ds, small_cfg, omega=2)
        n_q = len(small_ds.split("train-query"))
        assert len(t.positives) == n_q
        assert len(t.records) == n_q
        for rows, rec in zip(t.positives, t.records):
            assert len(rows) == small_cfg.k_positives
            assert len(rec.entries) == 9 * small_cfg.k_positives
            assert rec.tau == small_cfg.taus[0]
            assert rec.generation == 1

    def test_record_ids_are_global_image_ids(self, small_ds, small_cfg):
        model = self.frozen(small_ds)
        t = trainer.compute_generation_targets(model, small_ds, small_cfg, omega=2)
        gallery_ids = {img.id for img in small_ds.split("train-gallery")}
        query_ids = [img.id for img in small_ds.split("train-query")]
        for qid, rec in zip(query_ids, t.records):
            assert rec.query_id == qid
            assert {gid for gid, _ in rec.entries} <= gallery_ids

    def test_no_regions_mode_uses_image_entries(self, small_ds):
        cfg = RunConfig.create(
            generations=2, epochs=1, k_positives=5, use_regions=False, eval_out_dim=32
        )
        t = trainer.compute_generation_targets(self.frozen(small_ds), small_ds, cfg, omega=2)
        for rec in t.records:
            assert all(rid == 0 for _, rid in rec.entries)
            assert len(rec.entries) == cfg.k_positives

    def test_halves_only_mode(self, small_ds):
        cfg = RunConfig.create(
            generations=2, epochs=1, k_positives=5, use_quarters=False, eval_out_dim=32
        )
        t = trainer.compute_generation_targets(self.frozen(small_ds), small_ds, cfg, omega=2)
        for rec in t.records:
            assert sorted({rid for _, rid in rec.entries}) == [0, 1, 2, 3, 4]
            assert len(rec.entries) == 5 * cfg.k_positives

    def test_naive_topk_mines_plain_neighbors_without_labels(self, small_ds):
        cfg = RunConfig.create(
            generations=2, epochs=1, k_positives=5, naive_topk=True, eval_out_dim=32
        )
        model = self.frozen(small_ds)
        t = trainer.compute_generation_targets(model, small_ds, cfg, omega=2)
        assert t.records == []
        gallery = small_ds.split("train-gallery")
        _, g_descs = trainer.encode_images(model, gallery)
        _, q_descs = trainer.encode_images(model, small_ds.split("train-query"))
        from regionsim.mining import plain_top_k

        for qrow, rows in enumerate(t.positives):
            assert list(rows) == plain_top_k(q_descs[qrow], g_descs, 5)

    def test_generation_one_has_no_targets(self, small_ds, small_cfg):
        with pytest.raises(SequencingError):
            trainer.compute_generation_targets(self.frozen(small_ds), small_ds, small_cfg, omega=1)


class TestTrainGeneration:
    def test_later_generation_requires_previous_checkpoint(self, small_ds, small_cfg):
        with pytest.raises(SequencingError):
            trainer.train_generation(2, None, small_ds, small_cfg)

    def test_generation_mismatch_rejected(self, small_ds, small_cfg, small_run):
        result, _ = small_run
        gen2 = result.generations[1].checkpoint
        with pytest.raises(SequencingError):
            trainer.train_generation(2, gen2, small_ds, small_cfg)

    def test_generation_index_positive(self, small_ds, small_cfg):
        with pytest.raises(SequencingError):
            trainer.train_generation(0, None, small_ds, small_cfg)


class TestPipeline:
    def test_row_and_artifact_counts(self, small_run, small_cfg):
        result, out = small_run
        assert len(result.metrics_rows) == small_cfg.generations
        assert [gen for gen, _ in result.metrics_rows] == [1, 2]
        assert (out / "gen1.ckpt").exists()
        assert (out / "gen2.ckpt").exists()
        assert (out / "metrics.csv").exists()
        assert not (out / "labels_gen1.txt").exists()
        assert (out / "labels_gen2.txt").exists()

    def test_generation_one_trains_without_labels(self, small_run):
        result, _ = small_run
        assert result.generations[0].records == []
        assert result.generations[0].label_digest == ""
        assert result.generations[1].records

    def test_same_initialization_every_generation(self, small_run):
        result, _ = small_run
        digests = {g.init_digest for g in result.generations}
        assert len(digests) == 1

    def test_metrics_csv_matches_rows(self, small_run):
        result, out = small_run
        text = (out / "metrics.csv").read_text()
        assert text == result.metrics_csv
        lines = text.strip().splitlines()
        assert lines[0] == "generation,recall1,recall5,recall10"
        assert len(lines) == 3

    def test_label_file_round_trips_records(self, small_run):
        result, out = small_run
        want = "".join(format_record(r) + "\n" for r in result.generations[1].records)
        assert (out / "labels_gen2.txt").read_text() == want

    def test_checkpoint_metadata(self, small_run, small_ds, small_cfg):
        from regionsim.config import config_digest

        result, out = small_run
        ckpt = ck.load_checkpoint(str(out / "gen2.ckpt"))
        assert ckpt.generation == 2
        assert ckpt.seed == small_cfg.seed
        assert ckpt.epoch == small_cfg.epochs
        assert ckpt.config_hash == config_digest(small_cfg, small_ds.world_key)

    def test_tuple_counts_recorded(self, small_run, small_cfg):
        result, _ = small_run
        for gen in result.generations:
            counts = gen.stats["tuples_per_epoch"]
            assert len(counts) == small_cfg.epochs
            assert all(c >= 0 for c in counts)

    def test_single_generation_baseline_run(self, small_ds, tmp_path):
        cfg = RunConfig.create(generations=1, epochs=1, seed=1, eval_out_dim=32)
        result = trainer.run_pipeline(small_ds, cfg, out_dir=str(tmp_path))
        assert len(result.metrics_rows) == 1
        assert result.generations[0].records == []
        assert not list(tmp_path.glob("labels_*"))


class TestDeterminism:
    def test_repeat_run_bitwise_identical(self, small_ds, small_cfg, small_run, tmp_path):
        result, out = small_run
        again = trainer.run_pipeline(small_ds, small_cfg, out_dir=str(tmp_path))
        assert again.metrics_csv == result.metrics_csv
        for name in ("gen1.ckpt", "gen2.ckpt", "labels_gen2.txt", "metrics.csv"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()

    def test_worker_pool_size_is_invisible(self, small_ds, small_run, tmp_path):
        result, out = small_run
        cfg4 = RunConfig.create(
            generations=2, epochs=1, k_positives=5, seed=0, workers=4, eval_out_dim=32
        )
        pooled = trainer.run_pipeline(small_ds, cfg4, out_dir=str(tmp_path))
        assert pooled.metrics_csv == result.metrics_csv
        for name in ("gen1.ckpt", "gen2.ckpt", "labels_gen2.txt"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()
