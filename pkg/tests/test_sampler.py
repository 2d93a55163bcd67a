import filecmp
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opdkit.errors import (
    AnnotationError,
    DegenerateDenominator,
    InvalidAlpha,
    NoMonotonicPhases,
    TooShortEpisode,
    ZeroHop,
)
from opdkit.sampler import (
    BINS,
    EpisodeAnnotation,
    ProgressPair,
    SamplerConfig,
    assign_bin,
    build_pairs,
    discretize,
    hop_score,
    load_image,
    perturb_observation,
    perturbation_manifest,
    read_annotations,
    read_pairs,
    sample_pairs,
    save_image,
    tercile_boundaries,
    write_pairs,
)

SETTINGS = ("Real", "Sim", "UMI", "Human")


def ann(eid="ep", L=300, kf=(0, 150, 299), **kw):
    return EpisodeAnnotation(eid, "put the cup on the plate", L, kf, **kw)


def corpus(n=100, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        L = int(rng.integers(200, 600))
        N = int(rng.integers(1, 4))
        inner = sorted(rng.choice(np.arange(40, L - 40), size=N - 1, replace=False).tolist())
        out.append(EpisodeAnnotation(f"ep{i:03d}", f"task {i % 7}", L, (0, *inner, L - 1),
                                     setting=SETTINGS[i % 4]))
    return out


class TestDiscretize:
    def test_reference_case(self):
        seq = discretize(ann(), 30)
        assert seq.M == 10
        assert [seq.exact_potential(i) for i in range(11)] == [Fraction(i, 10) for i in range(11)]
        assert seq.potentials.tolist() == [i / 10 for i in range(11)]
        assert seq.frames[0] == 0 and seq.frames[5] == 150 and seq.frames[-1] == 299

    def test_small_episode(self):
        seq = discretize(ann(L=60, kf=(0, 30, 59)), 30)
        assert seq.M == 2
        assert seq.potentials.tolist() == [0, 0.5, 1.0]

    def test_too_short(self):
        with pytest.raises(TooShortEpisode):
            discretize(ann(L=30, kf=(0, 15, 29)), 30)

    def test_phase_filtering(self):
        seq = discretize(ann(phases=(False, True)), 30)
        assert seq.M == 5 and seq.frames[0] == 150 and seq.frames[-1] == 299
        with pytest.raises(NoMonotonicPhases):
            discretize(ann(phases=(False, False)), 30)
        assert discretize(ann(phases=(False, False)), 30, retained_only=False).M == 10

    def test_bad_annotation(self):
        with pytest.raises(AnnotationError):
            ann(kf=(0, 150, 150, 299))
        with pytest.raises(AnnotationError):
            ann(kf=(1, 299))
        with pytest.raises(AnnotationError):
            EpisodeAnnotation.from_dict({"episode_id": "x"})

    @settings(max_examples=100)
    @given(st.integers(31, 2000), st.integers(1, 5), st.integers(5, 40))
    def test_potentials_strictly_increasing(self, L, N, C):
        kf = [0] + [round(L * j / N) for j in range(1, N)] + [L - 1]
        if any(b <= a for a, b in zip(kf, kf[1:])):
            return
        try:
            seq = discretize(EpisodeAnnotation("e", "", L, tuple(kf)), C)
        except TooShortEpisode:
            assert (L // C) // N == 0 or min(b - a for a, b in zip(kf, kf[1:])) < (L // C) // N
            return
        pots = seq.potentials
        assert pots[0] == 0 and pots[-1] == 1
        assert np.all(np.diff(pots) > 0)
        assert seq.M == N * ((L // C) // N)
        assert set(kf) <= set(seq.frames)


class TestHopAndBins:
    def test_hop_examples(self):
        assert hop_score(0.5, 0.75, 0, 1) == 0.5
        assert hop_score(0.5, 0.25, 0, 1) == -0.5
        assert hop_score(0.3, 1.0, 0, 1) == 1.0
        with pytest.raises(DegenerateDenominator):
            hop_score(1.0, 1.0, 0, 1)
        with pytest.raises(DegenerateDenominator):
            hop_score(0.0, -0.1, 0, 1)

    def test_bins(self):
        assert assign_bin(0.2) == "Small"
        assert assign_bin(0.5) == "Medium"
        assert assign_bin(-0.9) == "Large"
        assert assign_bin(Fraction(1, 3)) == "Small"
        assert assign_bin(Fraction(2, 3)) == "Medium"
        assert assign_bin(Fraction(2, 3) + Fraction(1, 10**9)) == "Large"
        with pytest.raises(ZeroHop):
            assign_bin(0)

    @settings(max_examples=300)
    @given(st.integers(1, 40), st.data())
    def test_hop_ranges(self, M, data):
        p = data.draw(st.integers(0, M))
        q = data.draw(st.integers(0, M))
        try:
            h = hop_score(Fraction(p, M), Fraction(q, M), Fraction(0), Fraction(1))
        except DegenerateDenominator:
            assert (q >= p and p == M) or (q < p and p == 0)
            return
        if q >= p:
            assert 0 <= h <= 1
        else:
            assert -1 <= h < 0
        if q == M:
            assert h == 1


class TestSampling:
    def test_single_sequence_balance(self):
        seq = discretize(ann(), 30)
        pairs, rep = sample_pairs([seq], SamplerConfig(quota=4, seed=5))
        for b in BINS:
            in_bin = [p for p in pairs if p.bin == b]
            pos = sum(p.label == 1 for p in in_bin)
            neg = sum(p.label == -1 for p in in_bin)
            assert abs(pos - neg) <= 1
        for cell, n in rep.cell_counts.items():
            if n == 4:
                sel = [p for p in pairs if f"{p.bin}:{p.stratum}" == cell]
                assert sum(p.label == 1 for p in sel) == 2

    def test_pair_contracts(self):
        anns = corpus(40)
        lengths = {a.episode_id: a.length for a in anns}
        pairs, rep, fails = build_pairs(anns, SamplerConfig(quota=25, seed=1))
        assert not fails and pairs
        for p in pairs:
            assert p.hop != 0
            assert (p.hop > 0) == (p.label == 1)
            exact = hop_score(Fraction(p.before_index, p.num_states), Fraction(p.after_index, p.num_states), 0, 1)
            assert float(exact) == p.hop
            assert assign_bin(exact) == p.bin
            assert p.ref_start == (f"{p.episode_id}/0",)
            assert p.ref_end == (f"{p.episode_id}/{lengths[p.episode_id] - 1}",)
            assert p.frame_distance == abs(p.after_frame - p.before_frame)
        for b, counts in rep.label_counts.items():
            assert abs(counts["pos"] - counts["neg"]) <= 1
        assert len({p.id for p in pairs}) == len(pairs)

    def test_partial_fill(self):
        seq = discretize(ann(), 30)
        pairs, rep = sample_pairs([seq], SamplerConfig(quota={"Large": 100}, dt_boundaries=(), seed=0))
        large = [p for p in pairs if p.bin == "Large"]
        assert all(p.bin == "Large" for p in pairs)
        (short,) = rep.shortfalls
        assert (short.bin, short.requested, short.available, short.filled) == ("Large", 100, 44, 44)
        assert len(large) == 44

    def test_quota_keys(self):
        cfg = SamplerConfig(quota={"Small": 3, "Small:1": 7})
        assert cfg.quota_for("Small", 0) == 3
        assert cfg.quota_for("Small", 1) == 7
        assert cfg.quota_for("Large", 0) == 0

    def test_seed_changes_selection(self):
        seqs = [discretize(a, 30) for a in corpus(10)]
        a, _ = sample_pairs(seqs, SamplerConfig(quota=6, seed=1))
        b, _ = sample_pairs(seqs, SamplerConfig(quota=6, seed=2))
        assert [p.to_dict() for p in a] != [p.to_dict() for p in b]

    def test_input_order_irrelevant(self):
        seqs = [discretize(a, 30) for a in corpus(10)]
        a, _ = sample_pairs(seqs, SamplerConfig(quota=6, seed=1))
        b, _ = sample_pairs(seqs[::-1], SamplerConfig(quota=6, seed=1))
        assert a == b

    def test_terciles(self):
        assert tercile_boundaries([1, 2, 3, 4, 5, 6, 7]) == (3, 5)


def test_files_byte_identical(tmp_path):
    anns = corpus(20)
    for name in ("a", "b"):
        pairs, _, _ = build_pairs(anns, SamplerConfig(quota=10, seed=42))
        write_pairs(tmp_path / f"{name}.jsonl", pairs)
    assert filecmp.cmp(tmp_path / "a.jsonl", tmp_path / "b.jsonl", shallow=False)
    back = read_pairs(tmp_path / "a.jsonl")
    assert back == pairs
    assert json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])["schema_version"] == 1


def test_read_annotations(tmp_path):
    p = tmp_path / "ann.jsonl"
    p.write_text(json.dumps(ann().to_dict()) + "\n{oops\n" + json.dumps({"episode_id": "z", "length": 3}) + "\n")
    anns, errors = read_annotations(p)
    assert len(anns) == 1 and [e["line"] for e in errors] == [2, 3]


def test_pair_schema_guard():
    pairs, _, _ = build_pairs([ann()], SamplerConfig(quota=1))
    d = pairs[0].to_dict()
    d["schema_version"] = 99
    with pytest.raises(ValueError):
        ProgressPair.from_dict(d)


class TestNoise:
    def test_alpha_zero_bit_identical(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        out = perturb_observation(img, 0.0, seed=1)
        assert out.tobytes() == img.tobytes() and out is not img

    def test_alpha_one_is_standard_normal(self):
        out = perturb_observation(np.full((1000, 1000), 0.3), 1.0, seed=3)
        assert abs(out.mean()) < 0.01
        assert abs(out.var() - 1) < 0.01

    def test_alpha_small(self):
        out = perturb_observation(np.full((1000, 1000), 0.5), 0.05, seed=4)
        assert out.mean() == pytest.approx(0.475, rel=0.05)
        assert out.var() == pytest.approx(0.0025, rel=0.05)

    def test_not_clipped_and_seeded(self):
        a = perturb_observation(np.zeros((50, 50)), 0.5, seed=9)
        b = perturb_observation(np.zeros((50, 50)), 0.5, seed=9)
        assert np.array_equal(a, b)
        assert a.min() < 0

    def test_invalid_alpha(self):
        with pytest.raises(InvalidAlpha):
            perturb_observation(np.zeros(3), 1.5, 0)

    def test_npy_roundtrip(self, tmp_path):
        img = np.random.default_rng(1).random((4, 5, 3)).astype(np.float32)
        save_image(tmp_path / "x.npy", img)
        back = load_image(tmp_path / "x.npy")
        assert back.dtype == np.float32 and np.array_equal(back, img)

    def test_manifest(self):
        pairs, _, _ = build_pairs([ann()], SamplerConfig(quota=2))
        m = perturbation_manifest(pairs, 0.05, 7)
        refs = [e["frame_ref"] for e in m]
        assert refs == sorted(set(refs))
        assert all(e["noise_level"] == 0.05 and isinstance(e["seed"], int) for e in m)
        assert m == perturbation_manifest(pairs, 0.05, 7)
