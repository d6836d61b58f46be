"""Acceptance gate: one test per headline guarantee of the package.

Each test prints a single pass/fail line (visible under ``pytest -s``) and
enforces its own wall-clock budget, so a run of this file doubles as a
readable scorecard for the whole pipeline.
"""

import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from varicurate.cli import run
from varicurate.curation import (
    DivergenceConfig,
    divergence_scores,
    ds_noise_detect,
    make_plan,
    stage1_quality_filter,
    stage2_identity_filter,
)
from varicurate.data import (
    GENDERS,
    RACES,
    LabelTable,
    load_embeddings,
    load_labels,
    matrix_to_embedding_set,
    mean_by_identity,
    save_embeddings,
    save_labels,
)
from varicurate.guidance import (
    EmbedMap,
    GuidanceConfig,
    MixtureModel,
    NoiseSchedule,
    diversity_report,
    guided_sample,
    unguided_sample,
)
from varicurate.refinement import FrcConfig, refine
from varicurate.vendi import vendi_loss_grad, vendi_score


@contextmanager
def _criterion(num, label, budget_s):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        elapsed = time.perf_counter() - start
        print(f"[{num}] {label}: FAIL [{elapsed:.2f} s]")
        raise
    elapsed = time.perf_counter() - start
    verdict = "PASS" if elapsed < budget_s else "FAIL"
    print(f"[{num}] {label}: {verdict} [{elapsed:.2f} s, budget {budget_s:g} s]")
    assert elapsed < budget_s, f"runtime {elapsed:.2f} s exceeds {budget_s:g} s"


def _unit(v):
    return v / np.linalg.norm(v)


def _unit_rows(rng, n, d):
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _orthonormal_rows(rng, n, d):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q.T[:n]


# ---------------------------------------------------------------------------
# 1. Diversity score exactness on batches with known spectra.
# ---------------------------------------------------------------------------


def test_01_vendi_score_exactness():
    with _criterion(1, "vendi score exactness", 1.0):
        rng = np.random.default_rng(7)
        for n in range(2, 17):
            row = _unit(rng.standard_normal(12))
            assert abs(vendi_score(np.tile(row, (n, 1))) - 1.0) < 1e-8
            assert abs(vendi_score(_orthonormal_rows(rng, n, 16)) - n) < 1e-8
        two = np.array([[1.0, 0.0], [0.5, np.sqrt(0.75)]])
        assert abs(vendi_score(two) - 1.75477) < 1e-5


# ---------------------------------------------------------------------------
# 2. Analytic gradient against central finite differences.
# ---------------------------------------------------------------------------


def _fd_tangent_gradient(u, h=1e-6):
    """Central difference of -vendi through row renormalization."""
    fd = np.zeros_like(u)
    for i in range(u.shape[0]):
        for j in range(u.shape[1]):
            lo, hi = u.copy(), u.copy()
            hi[i, j] += h
            lo[i, j] -= h
            hi[i] /= np.linalg.norm(hi[i])
            lo[i] /= np.linalg.norm(lo[i])
            fd[i, j] = (-vendi_score(hi) + vendi_score(lo)) / (2.0 * h)
    return fd


def _nondegenerate_batch(rng):
    """Random unit-row batch whose kernel spectrum is simple and well separated."""
    while True:
        n = int(rng.integers(2, 9))
        d = int(rng.integers(2, 17))
        u = _unit_rows(rng, n, d)
        lam = np.linalg.eigvalsh(u @ u.T / n)
        if lam.min() > 1e-4 and np.diff(lam).min() > 1e-3:
            return u


def test_02_gradient_fidelity():
    with _criterion(2, "gradient matches finite differences", 30.0):
        rng = np.random.default_rng(11)
        for _ in range(100):
            u = _nondegenerate_batch(rng)
            _, grad, jitter_applied = vendi_loss_grad(u)
            assert not jitter_applied
            assert_allclose(grad, _fd_tangent_gradient(u), rtol=1e-5, atol=1e-8)


# ---------------------------------------------------------------------------
# 3. Guidance pushes sampled batches toward lower pairwise similarity.
# ---------------------------------------------------------------------------


def test_03_guided_diversity_trend():
    with _criterion(3, "guided diversity trend", 300.0):
        schedule = NoiseSchedule.cosine(50)
        model = MixtureModel.orthogonal(4, 8)
        embed_map = EmbedMap.sphere()
        wins = 0
        for seed in range(20):
            mean_cos = []
            for scale in (0.0, 1.0, 10.0):
                cfg = GuidanceConfig(scale=scale, batch_size=64, seed=seed)
                traj = guided_sample(schedule, model, embed_map, cfg)
                mean_cos.append(diversity_report(traj).mean_pairwise_cosine)
                if scale == 0.0:
                    plain = unguided_sample(schedule, model, embed_map, cfg)
                    assert np.array_equal(traj.latents, plain.latents)
                    assert np.array_equal(
                        traj.final_embeddings, plain.final_embeddings
                    )
            wins += mean_cos[0] > mean_cos[1] > mean_cos[2]
        assert wins >= 18, f"strict decrease in only {wins}/20 seeds"


# ---------------------------------------------------------------------------
# 4. Neighborhood refinement recovers planted label corruption.
# ---------------------------------------------------------------------------


def test_04_label_recovery():
    with _criterion(4, "corrupted label recovery", 10.0):
        restored = 0
        total = 0
        for trial in range(50):
            rng = np.random.default_rng(1000 + trial)
            centers = _orthonormal_rows(rng, 4, 8)
            assign = np.repeat(np.arange(4), 20)
            points = centers[assign] + 0.15 * rng.standard_normal((80, 8))
            points /= np.linalg.norm(points, axis=1, keepdims=True)
            es = matrix_to_embedding_set(points, [f"p{i:02d}" for i in range(80)])
            truth = [RACES[a] for a in assign]

            table = LabelTable.empty(list(es.sample_ids), source="clip")
            table.race = list(truth)
            corrupted = rng.choice(80, size=8, replace=False)
            for i in corrupted:
                table.race[i] = RACES[(assign[i] + 1 + int(rng.integers(3))) % 4]

            refined, _ = refine(es, table, FrcConfig(k=10, attributes=("race",)))
            restored += sum(refined.race[i] == truth[i] for i in corrupted)
            total += len(corrupted)
        rate = restored / total
        assert rate >= 0.95, f"restored {restored}/{total} = {rate:.3f}"


# ---------------------------------------------------------------------------
# 5. Divergence score semantics: singleton exactness, outlier detection.
# ---------------------------------------------------------------------------


def test_05_divergence_semantics():
    with _criterion(5, "divergence score semantics", 5.0):
        rng = np.random.default_rng(23)

        singles = matrix_to_embedding_set(
            _unit_rows(rng, 6, 10), [f"solo{i}" for i in range(6)]
        )
        scored = divergence_scores(singles, mean_by_identity(singles))
        assert (scored.divergence_score == 1.0).all()

        centers = _orthonormal_rows(rng, 12, 16)
        rows, sample_ids, identity_ids, planted = [], [], [], []
        for i in range(12):
            for j in range(5):
                rows.append(_unit(centers[i] + 0.02 * rng.standard_normal(16)))
                sample_ids.append(f"g{i:02d}-{j}")
                identity_ids.append(f"id{i:02d}")
            if i < 4:
                stray = rng.standard_normal(16)
                stray -= (stray @ centers[i]) * centers[i]
                rows.append(_unit(stray))
                sample_ids.append(f"g{i:02d}-x")
                identity_ids.append(f"id{i:02d}")
                planted.append(f"g{i:02d}-x")
        es = matrix_to_embedding_set(np.array(rows), sample_ids, identity_ids)
        scored = divergence_scores(es, mean_by_identity(es))

        ds = dict(zip(scored.sample_ids, scored.divergence_score))
        assert all(ds[sid] < 0.3 for sid in planted)
        assert all(v > 0.5 for sid, v in ds.items() if sid not in planted)

        report = ds_noise_detect(scored, DivergenceConfig())
        assert sorted(report.removed) == sorted(planted)


# ---------------------------------------------------------------------------
# 6. Threshold filters against an exhaustive comparison oracle.
# ---------------------------------------------------------------------------


def test_06_threshold_fidelity():
    with _criterion(6, "filter threshold fidelity", 5.0):
        rng = np.random.default_rng(97)
        n = 10_000

        ids = [f"q{i:05d}" for i in range(n)]
        quality = rng.uniform(0.0, 1.0, n)
        quality[::997] = 0.7
        table = LabelTable.empty(ids, source="external")
        table.quality_score[:] = quality
        report = stage1_quality_filter(table, 0.7)
        oracle_keep = [sid for sid, q in zip(ids, quality) if q >= 0.7]
        oracle_drop = [sid for sid, q in zip(ids, quality) if q < 0.7]
        assert list(report.kept) == oracle_keep
        assert list(report.removed) == oracle_drop
        assert set(ids[::997]) <= set(report.kept)

        base_rows = _unit_rows(rng, 100, 8)
        base_ids = [f"b{i:03d}" for i in range(100)]
        base = matrix_to_embedding_set(base_rows, base_ids, base_ids)
        owner = rng.integers(0, 100, n)
        mix = rng.uniform(0.0, 1.0, n)[:, None]
        gen_rows = mix * base_rows[owner] + (1.0 - mix) * rng.standard_normal((n, 8))
        gen = matrix_to_embedding_set(
            gen_rows,
            [f"s{i:05d}" for i in range(n)],
            [base_ids[k] for k in owner],
        )
        report = stage2_identity_filter(base, gen, 0.3)
        gen64 = gen.data.astype(np.float64)
        ref64 = base.data.astype(np.float64)[owner]
        oracle_keep = set()
        for i in range(n):
            cos = float(gen64[i] @ ref64[i]) / (
                np.linalg.norm(gen64[i]) * np.linalg.norm(ref64[i])
            )
            if cos >= 0.3:
                oracle_keep.add(gen.sample_ids[i])
        assert set(report.kept) == oracle_keep
        assert report.removed and report.kept

        # exact boundary: a 3-4-5 row against a basis row has cosine 3/5 bitwise
        edge_base = matrix_to_embedding_set(np.eye(1, 8), ["eb"], ["eb"])
        edge_gen = matrix_to_embedding_set(
            np.array([[3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]), ["eg"], ["eb"]
        )
        edge = stage2_identity_filter(edge_base, edge_gen, 0.6)
        assert edge.kept == ("eg",)


# ---------------------------------------------------------------------------
# 7. Generation plan: balance and conditioning draw distributions.
# ---------------------------------------------------------------------------


def test_07_plan_fidelity():
    with _criterion(7, "generation plan fidelity", 10.0):
        plan = make_plan(1250, 50)
        assert plan.total_identities == 10_000
        assert plan.total_images == 500_000
        assert sum(1 for _ in plan.iter_records()) == 500_000

        age = plan.age_draws[:10_000]
        ds = plan.ds_draws[:10_000]
        assert age.min() >= 0.0 and age.max() <= 1.0
        assert ds.min() >= 0.5 and ds.max() <= 0.8
        assert stats.kstest(age, "uniform", args=(0.0, 1.0)).pvalue >= 0.01
        assert stats.kstest(ds, "uniform", args=(0.5, 0.3)).pvalue >= 0.01


# ---------------------------------------------------------------------------
# 8. Storage round trips and the full command-line pipeline.
# ---------------------------------------------------------------------------

_D_CLIP = 8
_D_FR = 24
_CELLS = [(race, gender) for race in RACES for gender in GENDERS]


def _build_planted_dataset(root, rng):
    """Planted 200-sample corpus: 8 cells x 5 identities x 5 images.

    Every later pipeline stage has designated casualties baked in, so the
    kept/removed sets can be written down before anything runs:

    * 4 samples with quality 0.65 (plus one exactly at the 0.7 boundary),
    * 5 samples whose image embedding sits in the wrong race direction,
    * 3 identities whose recognition embeddings live in another cell,
    * 2 samples far from their own identity center but still inside
      their cell's demographic neighborhood.
    """
    sample_ids, identity_ids, cell_of = [], [], []
    ident = {}
    for c, (race, gender) in enumerate(_CELLS):
        for j in range(5):
            ident[(c, j)] = f"{race.lower()}-{gender.lower()}-{j}"
            for _ in range(5):
                sample_ids.append(f"s{len(sample_ids):03d}")
                identity_ids.append(ident[(c, j)])
                cell_of.append(c)
    n = len(sample_ids)
    index = {sid: i for i, sid in enumerate(sample_ids)}

    def sid(c, j, m):
        return f"s{(c * 5 + j) * 5 + m:03d}"

    quality_removed = [sid(c, 0, 0) for c in range(4)]
    boundary_kept = sid(1, 1, 0)
    wrong_race = {sid(c, 2, 1): c for c in range(5)}
    defectors = {(4, 4): 6, (5, 4): 4, (6, 4): 1}
    outliers = [(7, 0, 4), (0, 3, 4)]

    residual = {}
    for c in range(8):
        for j in range(5):
            v = np.zeros(_D_FR)
            v[8:16] = rng.standard_normal(8)
            residual[(c, j)] = _unit(v)

    def cell_dir(c):
        v = np.zeros(_D_FR)
        v[c] = 1.0
        return v

    centers = {}
    for c in range(8):
        for j in range(5):
            position = defectors.get((c, j), c)
            centers[ident[(c, j)]] = _unit(2.0 * cell_dir(position) + residual[(c, j)])

    fr = np.zeros((n, _D_FR))
    for i in range(n):
        fr[i] = _unit(centers[identity_ids[i]] + 0.05 * rng.standard_normal(_D_FR))
    for c, j, m in outliers:
        pull = -0.408
        junk = np.zeros(_D_FR)
        junk[16:24] = rng.standard_normal(8)
        v = pull * residual[(c, j)] + np.sqrt(1.0 - pull * pull) * _unit(junk)
        fr[index[sid(c, j, m)]] = _unit(0.45 * cell_dir(c) + 1.4 * v)

    clip = np.zeros((n, _D_CLIP))
    for i in range(n):
        race_idx, gender_idx = divmod(cell_of[i], 2)
        if sample_ids[i] in wrong_race:
            race_idx = (race_idx + 1) % 4
        proto = np.zeros(_D_CLIP)
        proto[race_idx] = 1.0
        proto[4 + gender_idx] = 0.8
        clip[i] = _unit(proto + 0.05 * rng.standard_normal(_D_CLIP))

    save_embeddings(matrix_to_embedding_set(fr, sample_ids, identity_ids), root / "fr.femb")
    save_embeddings(matrix_to_embedding_set(clip, sample_ids, identity_ids), root / "clip.femb")
    order = sorted(centers)
    save_embeddings(
        matrix_to_embedding_set(np.array([centers[k] for k in order]), order, order),
        root / "base_means.femb",
    )
    save_embeddings(
        matrix_to_embedding_set(np.eye(4, _D_CLIP), list(RACES)), root / "race_bank.femb"
    )
    save_embeddings(
        matrix_to_embedding_set(np.eye(2, _D_CLIP, k=4), list(GENDERS)),
        root / "gender_bank.femb",
    )

    quality = LabelTable.empty(list(sample_ids), source="external")
    quality.quality_score[:] = 0.9
    for s in quality_removed:
        quality.quality_score[index[s]] = 0.65
    quality.quality_score[index[boundary_kept]] = 0.7
    save_labels(quality, root / "quality.csv")

    # hand trace: per-cell survivor counts after all three removal stages
    expected_cells = {f"{race}/{gender}": 25 for race, gender in _CELLS}
    cell_name = [f"{race}/{gender}" for race, gender in _CELLS]
    for s in quality_removed:
        expected_cells[cell_name[cell_of[index[s]]]] -= 1
    for (c, _j), _target in defectors.items():
        expected_cells[cell_name[c]] -= 5
    for c, _j, _m in outliers:
        expected_cells[cell_name[c]] -= 1

    return {
        "sample_ids": sample_ids,
        "cell_of": cell_of,
        "index": index,
        "quality_removed": sorted(quality_removed),
        "boundary_kept": boundary_kept,
        "wrong_race": wrong_race,
        "defector_sids": sorted(
            sid(c, j, m) for (c, j) in defectors for m in range(5)
        ),
        "outlier_sids": sorted(sid(c, j, m) for c, j, m in outliers),
        "expected_cells": expected_cells,
    }


def _run_cli(*argv):
    result = run([str(a) for a in argv])
    assert result.exit_code == 0, f"exit {result.exit_code} for {argv}"
    return result


def test_08_format_and_pipeline_integrity(tmp_path, capsys):
    with _criterion(8, "storage format and CLI pipeline", 30.0):
        rng = np.random.default_rng(5)
        path = tmp_path / "roundtrip.femb"
        for i in range(1000):
            n = int(rng.integers(0, 33))
            d = int(rng.integers(1, 40))
            mat = rng.standard_normal((n, d)).astype(np.float32)
            ids = [
                f"样本-{i}-{j:03d}" if j % 7 == 0 else f"r{j:04d}" for j in range(n)
            ]
            idents = [f"id{j // 3}" for j in range(n)] if i % 3 else None
            es = matrix_to_embedding_set(mat, ids, idents)
            save_embeddings(es, path)
            first = path.read_bytes()
            loaded = load_embeddings(path)
            assert loaded == es
            save_embeddings(loaded, path)
            assert path.read_bytes() == first

        root = tmp_path / "pipe"
        root.mkdir()
        x = _build_planted_dataset(root, np.random.default_rng(20240818))

        _run_cli(
            "filter", "--stage", "1q", "--labels", root / "quality.csv",
            "--embeddings", root / "clip.femb", "--apply",
            "--embeddings-out", root / "clip_q.femb", "--out", root / "rep_1q.json",
        )
        _run_cli(
            "filter", "--stage", "1q", "--labels", root / "quality.csv",
            "--embeddings", root / "fr.femb", "--apply",
            "--embeddings-out", root / "fr_q.femb", "--out", root / "rep_1q_fr.json",
        )
        _run_cli(
            "label", "--images", root / "clip_q.femb",
            "--prompt-bank", root / "race_bank.femb",
            "--prompt-bank", root / "gender_bank.femb",
            "--out", root / "labels_zs.csv",
        )
        _run_cli(
            "frc", "--embeddings", root / "fr_q.femb",
            "--labels", root / "labels_zs.csv", "--k", 4,
            "--report-out", root / "rep_frc.json", "--out", root / "labels_frc.csv",
        )
        _run_cli(
            "filter", "--stage", "1d", "--embeddings", root / "fr_q.femb",
            "--labels", root / "labels_frc.csv", "--k", 10, "--apply",
            "--embeddings-out", root / "fr_1d.femb",
            "--labels-out", root / "labels_1d.csv", "--out", root / "rep_1d.json",
        )
        _run_cli(
            "ds", "--embeddings", root / "fr_1d.femb",
            "--means", root / "base_means.femb",
            "--labels", root / "labels_1d.csv", "--out", root / "labels_ds.csv",
        )
        _run_cli(
            "filter", "--stage", "2id", "--embeddings", root / "fr_1d.femb",
            "--base", root / "base_means.femb", "--labels", root / "labels_ds.csv",
            "--apply", "--embeddings-out", root / "fr_final.femb",
            "--labels-out", root / "labels_final.csv", "--out", root / "rep_2id.json",
        )
        _run_cli(
            "audit", "--embeddings", root / "fr_final.femb",
            "--labels", root / "labels_final.csv",
            "--out", root / "audit.json", "--hist-out", root / "hist.csv",
        )
        capsys.readouterr()

        rep_1q = json.loads((root / "rep_1q.json").read_text())
        rep_1q_fr = json.loads((root / "rep_1q_fr.json").read_text())
        assert sorted(rep_1q["removed"]) == x["quality_removed"]
        assert rep_1q["kept"] == rep_1q_fr["kept"]
        assert x["boundary_kept"] in rep_1q["kept"]
        assert len(rep_1q["kept"]) == 196

        zs = load_labels(root / "labels_zs.csv")
        for i, s in enumerate(zs.sample_ids):
            race_idx, gender_idx = divmod(x["cell_of"][x["index"][s]], 2)
            if s in x["wrong_race"]:
                race_idx = (race_idx + 1) % 4
            assert zs.race[i] == RACES[race_idx]
            assert zs.gender[i] == GENDERS[gender_idx]

        frc_rep = json.loads((root / "rep_frc.json").read_text())
        assert frc_rep["changed_count"] == {"race": 5, "gender": 0}
        assert sorted(rec[0] for rec in frc_rep["change_log"]) == sorted(x["wrong_race"])
        fixed = load_labels(root / "labels_frc.csv")
        for i, s in enumerate(fixed.sample_ids):
            race_idx, gender_idx = divmod(x["cell_of"][x["index"][s]], 2)
            assert fixed.race[i] == RACES[race_idx]
            assert fixed.gender[i] == GENDERS[gender_idx]

        rep_1d = json.loads((root / "rep_1d.json").read_text())
        assert sorted(rep_1d["removed"]) == x["defector_sids"]
        assert len(rep_1d["kept"]) == 181

        ds_table = load_labels(root / "labels_ds.csv")
        low = [
            s
            for s, v in zip(ds_table.sample_ids, ds_table.divergence_score)
            if v < 0.3
        ]
        assert sorted(low) == x["outlier_sids"]

        rep_2id = json.loads((root / "rep_2id.json").read_text())
        assert sorted(rep_2id["removed"]) == x["outlier_sids"]
        assert len(rep_2id["kept"]) == 179

        audit = json.loads((root / "audit.json").read_text())
        assert audit["cell_counts"] == x["expected_cells"]
        assert audit["n_samples"] == 179
        assert audit["n_identities"] == 37
        assert audit["noise_fraction"] == 0.0
        hist_rows = (root / "hist.csv").read_text().strip().splitlines()[1:]
        assert sum(int(r.rsplit(",", 1)[1]) for r in hist_rows) == 179

        final = load_embeddings(root / "fr_final.femb")
        assert sorted(final.sample_ids) == sorted(rep_2id["kept"])
