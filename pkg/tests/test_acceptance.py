"""Acceptance criteria 1-10, one test per criterion.

The default synthetic run (100 epochs, B=64, K=8, mask 0.25, L=2, d_h=256)
is trained once per module and shared by criteria 5, 7 and 10.
"""

import io
import itertools
import statistics
import time

import numpy as np
import pytest
from scipy.stats import binomtest

import oracles
from scale import numerics as nx
from scale.cli import main
from scale.featurestore import SyntheticSpec, decode_store, encode_store, generate_synthetic
from scale.losses import contrastive_mean, mcm_from_projections, mcm_loss, set_loss, symmetric_element_losses, total_loss
from scale.model import ModelConfig, encode_set, init_params
from scale.probes import ProbeConfig, extract_representations, ft_probe, knn_probe, linear_probe, lowshot_subsample
from scale.trainer import TrainConfig, config_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, train

CHANCE = 0.1


@pytest.fixture(scope="module")
def stores():
    return generate_synthetic(SyntheticSpec())


@pytest.fixture(scope="module")
def default_run(stores):
    train_store, _ = stores
    start = time.perf_counter()
    result = train(train_store, TrainConfig(), ModelConfig())
    print(f"default training: {time.perf_counter() - start:.0f} s")
    return result


def test_criterion_1_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    with nx.precision("float64"):
        for B, K, d in itertools.product(range(1, 4), range(1, 4), range(1, 5)):
            positions = B * 2 * K
            # every non-empty mask for small cases, a random sample otherwise
            if positions <= 8:
                masks = [np.array(bits, bool) for bits in itertools.product([0, 1], repeat=positions) if any(bits)]
            else:
                masks = [m for m in (rng.random((40, positions)) < 0.4) if m.any()]
            for mask in masks:
                masked = np.flatnonzero(mask)
                pred = oracles.random_unit(rng, positions, d)
                targ = oracles.random_unit(rng, positions, d)
                got = mcm_from_projections(pred[masked], targ, masked, 0.1).item()
                worst = max(worst, abs(got - oracles.mcm(pred, targ, masked, 0.1)))
            a, b = oracles.random_unit(rng, B, d), oracles.random_unit(rng, B, d)
            worst = max(worst, abs(contrastive_mean(a, b, 0.1).item() - oracles.contrastive_mean(a, b, 0.1)))
        # full path through the projection heads
        for seed in range(5):
            cfg = ModelConfig(d_in=3, d_h=8, layers=1, heads=2, d_proj=4, K=3)
            params = init_params(cfg, seed=seed)
            feats = rng.standard_normal((3, 2, 3, 3))
            mask = rng.random((3, 2, 3)) < 0.5
            mask[0, 0, 0] = True
            enc = encode_set(feats, np.sort(rng.random((3, 2, 3, 6)), axis=-1), mask, params, cfg)
            arrays = params.arrays()
            masked = np.flatnonzero(mask.reshape(-1))
            pred = oracles.head(enc.clip_tokens.data.reshape(-1, 8), arrays, "mcm_a")
            targ = oracles.head(feats.reshape(-1, 3), arrays, "mcm_b")
            worst = max(worst, abs(mcm_loss(enc, feats, mask, params, 0.1).item()
                                   - oracles.mcm(pred, targ, masked, 0.1)))
            a = oracles.head(enc.summary.data[:, 0], arrays, "set_a")
            b = oracles.head(enc.summary.data[:, 1], arrays, "set_b")
            worst = max(worst, abs(set_loss(enc.summary[:, 0], enc.summary[:, 1], params, 0.1).item()
                                   - oracles.contrastive_mean(a, b, 0.1)))
    elapsed = time.perf_counter() - start
    print(f"criterion 1: max abs diff {worst:.2e}, {elapsed:.1f} s")
    assert worst <= 1e-10
    assert elapsed < 10


def test_criterion_2_gradient_suite():
    start = time.perf_counter()
    worst = 0.0
    with nx.precision("float64"):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            cfg = ModelConfig(d_in=4, d_h=8, layers=1, heads=2, d_proj=4, K=2)
            params = init_params(cfg, seed=seed)
            feats = rng.standard_normal((2, 2, 2, 4))
            coords = np.sort(rng.random((2, 2, 2, 6)), axis=-1)
            mask = np.zeros((2, 2, 2), bool)
            mask[np.arange(2)[:, None], np.arange(2)[None, :], rng.integers(0, 2, (2, 2))] = True

            def f():
                enc = encode_set(feats, coords, mask, params, cfg)
                return total_loss(enc, feats, mask, params, cfg.tau)[0]

            worst = max(worst, nx.grad_check(f, list(params.values()), step=1e-5))
    elapsed = time.perf_counter() - start
    print(f"criterion 2: max rel err {worst:.2e}, {elapsed:.1f} s")
    assert worst <= 1e-4
    assert elapsed < 120


def test_criterion_3_permutation_and_masking():
    start = time.perf_counter()
    cfg = ModelConfig(d_in=16, d_h=32, layers=2, heads=4, d_proj=8, K=8)
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        feats = rng.standard_normal((4, 8, 16))
        coords = np.sort(rng.random((4, 8, 6)), axis=-1)
        empty = np.zeros((4, 8), bool)
        base = encode_set(feats, coords, empty, params, cfg)
        perm = rng.permutation(8)
        moved = encode_set(feats[:, perm], coords[:, perm], empty, params, cfg)
        assert moved.summary.data.tobytes() == base.summary.data.tobytes()
        assert moved.clip_tokens.data.tobytes() == base.clip_tokens.data[:, perm].tobytes()
        loose = encode_set(feats[:, perm], coords[:, perm], empty, params, cfg, canonical=False)
        rel = np.abs(loose.summary.data - base.summary.data).max() / np.abs(base.summary.data).max()
        assert rel <= 1e-5
        mask = rng.random((4, 8)) < 0.25
        masked = encode_set(feats, coords, mask, params, cfg)
        poked = feats.copy()
        poked[mask] += rng.standard_normal((int(mask.sum()), 16)) * 5
        again = encode_set(poked, coords, mask, params, cfg)
        assert again.summary.data.tobytes() == masked.summary.data.tobytes()
        assert again.clip_tokens.data.tobytes() == masked.clip_tokens.data.tobytes()
    assert time.perf_counter() - start < 30


def test_criterion_4_loss_identities():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    with nx.precision("float64"):
        for d in range(1, 6):
            v = oracles.random_unit(rng, 1, d)
            assert contrastive_mean(v, oracles.random_unit(rng, 1, d), 0.1).item() == 0.0
        cfg = ModelConfig(d_in=4, d_h=8, layers=1, heads=2, d_proj=4, K=4)
        params = init_params(cfg, seed=0)
        for _ in range(1000):
            n = int(rng.integers(1, 9))
            a, b = oracles.random_unit(rng, n, 4), oracles.random_unit(rng, n, 4)
            assert np.all(symmetric_element_losses(a, b, float(rng.uniform(0.05, 1.0))).data >= 0)
        for _ in range(50):
            feats = rng.standard_normal((3, 2, 4, 4))
            mask = rng.random((3, 2, 4)) < 0.3
            mask[0, 0, 0] = True
            enc = encode_set(feats, np.sort(rng.random((3, 2, 4, 6)), axis=-1), mask, params, cfg)
            loss, report = total_loss(enc, feats, mask, params, cfg.tau)
            assert report.total == report.mcm + report.set
            assert loss.item() == report.mcm + report.set
            assert report.mcm >= 0 and report.set >= 0
    assert time.perf_counter() - start < 30


@pytest.fixture(scope="module")
def transfer(stores, default_run):
    """Accuracies of the four criterion-5 probes on the 500 eval videos."""
    train_store, eval_store = stores
    params = default_run.checkpoint.params
    cfg = ModelConfig()
    base_tr = extract_representations(train_store, None, cfg)
    base_ev = extract_representations(eval_store, None, cfg)
    tr = extract_representations(train_store, params, cfg)
    ev = extract_representations(eval_store, params, cfg)
    acc = {
        "knn_base": knn_probe(base_tr, base_ev, "mean-raw").accuracy,
        "knn_scale": knn_probe(tr, ev, "cls").accuracy,
        "linear_base": linear_probe(base_tr, base_ev, "baseline").accuracy,
        "linear_scale": linear_probe(tr, ev, "scale").accuracy,
    }
    print("criterion 5 accuracies:", acc)
    return acc, len(eval_store)


def _significantly_better(scale_acc, base_acc, n):
    p = binomtest(round(scale_acc * n), n, base_acc, alternative="greater").pvalue
    print(f"scale={scale_acc:.3f} baseline={base_acc:.3f} p={p:.2e}")
    return p < 0.01 and scale_acc - CHANCE >= 0.20


def test_criterion_5_baselines_near_chance(transfer):
    acc, _ = transfer
    assert abs(acc["knn_base"] - CHANCE) <= 0.05
    assert abs(acc["linear_base"] - CHANCE) <= 0.05


def test_criterion_5_scale_knn_beats_baseline(transfer):
    acc, n = transfer
    assert _significantly_better(acc["knn_scale"], acc["knn_base"], n)


def test_criterion_5_scale_linear_beats_baseline(transfer):
    acc, n = transfer
    assert _significantly_better(acc["linear_scale"], acc["linear_base"], n)


def test_criterion_6_mask_ablation_report(tmp_path):
    out = io.StringIO()
    report = tmp_path / "mask.csv"
    code = main(["sweep", "--axis", "mask", "--values", "0.15,0.25,0.35,0.45", "--report", str(report),
                 "--set", "synth.train_videos_per_class=20", "--set", "synth.eval_videos_per_class=10",
                 "--set", "train.epochs=2", "--set", "model.d_h=64"], out=out)
    assert code == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "mask,final_total,probe,feature,accuracy"
    assert [line.split(",")[0] for line in lines[1:]] == ["0.15", "0.25", "0.35", "0.45"]
    for line in lines[1:]:
        assert 0.0 <= float(line.split(",")[-1]) <= 1.0


def test_criterion_7_training_dynamics(default_run):
    totals = [e.total for e in default_run.log]
    assert len(totals) == 100
    first, last = statistics.median(totals[:10]), statistics.median(totals[-10:])
    print(f"criterion 7: median first 10 = {first:.4f}, last 10 = {last:.4f}")
    assert last < first


SMALL_SPEC = SyntheticSpec(seed=1, num_classes=3, train_videos_per_class=4, eval_videos_per_class=2, feature_dim=8)
SMALL_MODEL = ModelConfig(d_in=8, d_h=16, layers=1, heads=2, d_proj=8, K=4)
SMALL_TRAIN = TrainConfig(epochs=6, batch_size=4, seed=5)


def test_criterion_8_serialization(tmp_path, stores, default_run):
    for store in stores:
        blob = encode_store(store)
        assert encode_store(decode_store(blob)) == blob
    ckpt_blob = encode_checkpoint(default_run.checkpoint)
    assert encode_checkpoint(decode_checkpoint(ckpt_blob)) == ckpt_blob
    train_store, _ = generate_synthetic(SMALL_SPEC)
    straight = train(train_store, SMALL_TRAIN, SMALL_MODEL)
    path = tmp_path / "half.ckpt"
    train(train_store, SMALL_TRAIN, SMALL_MODEL, checkpoint_path=path, stop_after_epoch=3)
    resumed = train(train_store, SMALL_TRAIN, SMALL_MODEL,
                    resume=load_checkpoint(path, config_hash(SMALL_MODEL, SMALL_TRAIN)))
    assert encode_checkpoint(resumed.checkpoint) == encode_checkpoint(straight.checkpoint)
    assert [e.total for e in resumed.log] == [e.total for e in straight.log[3:]]


def test_criterion_9_determinism(tmp_path):
    tr, ev = tmp_path / "tr.scfs", tmp_path / "ev.scfs"
    synth = ["--set", "synth.seed=1", "--set", "synth.num_classes=3", "--set", "synth.train_videos_per_class=4",
             "--set", "synth.eval_videos_per_class=2", "--set", "synth.feature_dim=8"]
    assert main(["synth", *synth, "--out-train", str(tr), "--out-eval", str(ev)], out=io.StringIO()) == 0
    model = ["--set", "model.d_h=16", "--set", "model.heads=2", "--set", "model.d_proj=8", "--set", "model.layers=1",
             "--set", "model.K=4", "--set", "train.batch_size=4", "--set", "train.epochs=3"]
    probe = ["--set", "probe.lrs=0.01", "--set", "probe.wds=0", "--set", "probe.batch_sizes=16",
             "--set", "probe.optimizers=adam,sgd", "--set", "probe.epochs=3"]
    artifacts = []
    for run in ("a", "b"):
        ckpt, log = tmp_path / f"{run}.ckpt", tmp_path / f"{run}.log"
        assert main(["train", "--store", str(tr), "--out-ckpt", str(ckpt), "--log", str(log), *model],
                    out=io.StringIO()) == 0
        reports = []
        for kind in ("knn", "linear"):
            rep = tmp_path / f"{run}-{kind}.csv"
            assert main(["probe", "--kind", kind, "--train-store", str(tr), "--eval-store", str(ev),
                         "--ckpt", str(ckpt), "--k", "3", "--report", str(rep), *probe], out=io.StringIO()) == 0
            reports.append(rep.read_bytes())
        artifacts.append((log.read_bytes(), ckpt.read_bytes(), reports))
    assert artifacts[0] == artifacts[1]


def test_criterion_10_lowshot_ft(stores, default_run):
    train_store, eval_store = stores
    cfg = ModelConfig()
    pretrained, random_init = [], []
    for seed in range(3):
        base = ProbeConfig(kind="ft", lrs=(1e-3,), wds=(0.0,), batch_sizes=(64,), optimizers=("adam",),
                           epochs=10, lowshot=0.1, seed=seed)
        sub = lowshot_subsample(train_store, base.lowshot, seed)
        pretrained.append(ft_probe(sub, eval_store, cfg, default_run.checkpoint.params, base).accuracy)
        rnd = ProbeConfig(**{**base.__dict__, "ft_init": "random"})
        random_init.append(ft_probe(sub, eval_store, cfg, None, rnd).accuracy)
    print(f"criterion 10: checkpoint {pretrained}, random {random_init}")
    assert statistics.median(pretrained) >= statistics.median(random_init)
