"""Generator contracts: degenerate limits, determinism, chain statistics
against Monte Carlo counts, task difficulty calibration, mask sampling,
and the bit-exact corpus file round trip."""

import numpy as np
import pytest

from cbt.encoders import NUM_RESERVED_IDS
from cbt.synthdata import (CorpusSpec, class_means, generate, load_corpus,
                           sample_masks, save_corpus, token_class_of_id)


def bayes_frame_accuracy(spec: CorpusSpec, sequences) -> float:
    """Nearest-class-mean classification of single frames; with equal
    priors and isotropic noise this is the Bayes rule."""
    means = class_means(spec)
    x = np.vstack([s.x.values for s in sequences]).astype(np.float64)
    z = np.concatenate([s.latents for s in sequences])
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    return float((d2.argmin(axis=1) == z).mean())


class TestSpecValidation:
    def test_too_many_classes_for_vocab(self):
        with pytest.raises(ValueError, match="vocabulary"):
            CorpusSpec(vocab=8, num_latent_classes=8)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="classes"):
            CorpusSpec(num_latent_classes=1)

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            CorpusSpec.from_dict({"num_sequences": 5, "bogus": 1})


class TestGenerate:
    def test_degenerate_chain_noiseless(self):
        spec = CorpusSpec(num_sequences=3, seq_len=10, noise_sigma=0.0,
                          topic_persistence=1.0, seed=7)
        means = class_means(spec)
        for seq in generate(spec):
            assert len(set(seq.latents.tolist())) == 1
            c = int(seq.latents[0])
            for t in range(10):
                np.testing.assert_array_equal(
                    seq.x.values[t], means[c].astype(np.float32))
            assert seq.seq_label == c
            assert seq.next_label == c

    def test_same_seed_bit_identical(self):
        spec = CorpusSpec(num_sequences=20, seed=5)
        a = generate(spec)
        b = generate(spec)
        for sa, sb in zip(a, b):
            assert sa.x.values.tobytes() == sb.x.values.tobytes()
            assert sa.y.ids.tolist() == sb.y.ids.tolist()
            assert sa.latents.tolist() == sb.latents.tolist()

    def test_different_seed_differs(self):
        a = generate(CorpusSpec(num_sequences=2, seed=1))
        b = generate(CorpusSpec(num_sequences=2, seed=2))
        assert a[0].x.values.tobytes() != b[0].x.values.tobytes()

    def test_stay_rate_monte_carlo(self):
        spec = CorpusSpec(num_sequences=2200, seq_len=48,
                          topic_persistence=0.9, seed=3)
        stays = transitions = 0
        for seq in generate(spec):
            z = seq.latents
            stays += int((z[1:] == z[:-1]).sum())
            transitions += len(z) - 1
        assert transitions >= 100_000
        assert abs(stays / transitions - 0.9) < 0.01

    def test_aligned_tokens_match_latent_band(self):
        spec = CorpusSpec(num_sequences=10, alignment_shift=0, seed=11)
        for seq in generate(spec):
            for t in range(spec.seq_len):
                assert token_class_of_id(spec, int(seq.y.ids[t])) \
                    == int(seq.latents[t])

    def test_shifted_tokens_follow_rolled_latents(self):
        spec = CorpusSpec(num_sequences=5, alignment_shift=2, seed=12)
        for seq in generate(spec):
            rolled = np.roll(seq.latents, 2)
            for t in range(spec.seq_len):
                assert token_class_of_id(spec, int(seq.y.ids[t])) == int(rolled[t])

    def test_tokens_avoid_reserved_ids(self):
        for seq in generate(CorpusSpec(num_sequences=20, seed=13)):
            assert seq.y.ids.min() >= NUM_RESERVED_IDS

    def test_next_label_is_continuation_step(self):
        # with a frozen chain the continuation must equal the running class
        spec = CorpusSpec(num_sequences=4, topic_persistence=1.0, seed=14)
        for seq in generate(spec):
            assert seq.next_label == int(seq.latents[-1])


class TestDifficultyCalibration:
    def test_single_frame_bayes_imperfect_at_sigma_1(self):
        for sigma in (1.0, 1.2):
            spec = CorpusSpec(num_sequences=250, noise_sigma=sigma, seed=21)
            acc = bayes_frame_accuracy(spec, generate(spec))
            assert acc < 0.85, f"sigma={sigma} too easy: {acc}"
            assert acc > 2.0 / spec.num_latent_classes, "degenerate means"

    def test_context_resolves_ambiguity(self):
        # oracle that averages each frame with its true same-class run
        # neighbours: the accuracy gap is what pretraining exploits
        spec = CorpusSpec(num_sequences=150, seed=22)
        seqs = generate(spec)
        means = class_means(spec)
        single = bayes_frame_accuracy(spec, seqs)
        correct = total = 0
        for seq in seqs:
            z = seq.latents
            x = seq.x.values.astype(np.float64)
            for t in range(spec.seq_len):
                lo = t
                while lo > 0 and z[lo - 1] == z[t]:
                    lo -= 1
                hi = t
                while hi < spec.seq_len - 1 and z[hi + 1] == z[t]:
                    hi += 1
                pooled = x[lo:hi + 1].mean(axis=0)
                d2 = ((pooled - means) ** 2).sum(axis=1)
                correct += int(d2.argmin() == z[t])
                total += 1
        assert correct / total > single + 0.15

    def test_pairwise_mean_distances_all_equal(self):
        spec = CorpusSpec(seed=31)
        means = class_means(spec)
        dists = [np.linalg.norm(means[i] - means[j])
                 for i in range(8) for j in range(i + 1, 8)]
        np.testing.assert_allclose(dists, dists[0], rtol=1e-10)


class TestSampleMasks:
    def test_paper_ratios(self):
        rng = np.random.default_rng(0)
        m40 = sample_masks(40, 6, rng)
        assert len(m40.masked) == 6 and max(m40.masked) < 40
        m48 = sample_masks(48, 6, rng)
        assert len(m48.masked) == 6 and max(m48.masked) < 48

    def test_single_position(self):
        assert sample_masks(1, 1, np.random.default_rng(0)).masked == (0,)

    def test_overdraw_rejected(self):
        with pytest.raises(ValueError):
            sample_masks(4, 5, np.random.default_rng(0))

    def test_masks_are_distinct_and_uniformish(self):
        rng = np.random.default_rng(1)
        counts = np.zeros(10)
        for _ in range(2000):
            m = sample_masks(10, 3, rng)
            assert len(set(m.masked)) == 3
            counts[list(m.masked)] += 1
        freq = counts / counts.sum()
        assert np.abs(freq - 0.1).max() < 0.02


class TestCorpusFile:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = CorpusSpec(num_sequences=12, seed=17)
        seqs = generate(spec)
        path = tmp_path / "corpus.jsonl"
        save_corpus(path, spec, seqs)
        spec2, seqs2 = load_corpus(path)
        assert spec2 == spec
        assert len(seqs2) == len(seqs)
        for a, b in zip(seqs, seqs2):
            assert a.x.values.tobytes() == b.x.values.tobytes()
            assert a.x.values.dtype == b.x.values.dtype == np.float32
            assert a.y.ids.tolist() == b.y.ids.tolist()
            assert a.latents.tolist() == b.latents.tolist()
            assert (a.seq_label, a.next_label) == (b.seq_label, b.next_label)
        # a second save of the loaded corpus must be byte-identical
        path2 = tmp_path / "again.jsonl"
        save_corpus(path2, spec2, seqs2)
        assert path.read_bytes() == path2.read_bytes()

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(ValueError, match="empty"):
            load_corpus(path)

    def test_header_is_canonical_json_of_spec(self, tmp_path):
        spec = CorpusSpec(num_sequences=2, seed=9)
        path = tmp_path / "c.jsonl"
        save_corpus(path, spec, generate(spec))
        header = path.read_text().splitlines()[0]
        import json

        assert json.loads(header) == spec.to_dict()
        assert header == json.dumps(spec.to_dict(), sort_keys=True,
                                    separators=(",", ":"))
