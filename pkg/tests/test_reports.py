import numpy as np
import pytest

from lungseg.regions import REGIONS, all_labels, as_label, zone_box
from lungseg.reports import (
    EMBED_DIM,
    embed_report,
    parse_report,
    parse_report_detailed,
    pseudo_label_corpus,
    synthesize_report,
    tokenize,
)


class TestSynthesize:
    def test_no_lesions(self):
        assert synthesize_report((0, 0, 0, 0, 0, 0)) == "No pulmonary infection."

    def test_bilateral_two_zones(self):
        assert synthesize_report((1, 0, 0, 0, 0, 1)) == (
            "Bilateral pulmonary infection, two infected areas, "
            "upper left lung and lower right lung."
        )

    def test_unilateral_single_zone(self):
        assert synthesize_report((0, 1, 0, 0, 0, 0)) == (
            "Unilateral pulmonary infection, one infected area, middle left lung."
        )

    def test_three_zones_comma_join(self):
        text = synthesize_report((1, 1, 0, 0, 0, 1))
        assert "upper left lung, middle left lung and lower right lung" in text
        assert text.startswith("Bilateral pulmonary infection, three infected areas,")

    def test_invalid_label_rejected(self):
        with pytest.raises(ValueError):
            synthesize_report((1, 0, 2, 0, 0, 0))
        with pytest.raises(ValueError):
            synthesize_report((1, 0, 0))


class TestParse:
    def test_examples(self):
        assert parse_report(
            "Bilateral pulmonary infection, two infected areas, "
            "upper left lung and lower right lung."
        ) == (1, 0, 0, 0, 0, 1)
        assert parse_report("No pulmonary infection.") == (0, 0, 0, 0, 0, 0)
        assert parse_report(
            "Unilateral pulmonary infection, one infected area, middle left lung."
        ) == (0, 1, 0, 0, 0, 0)

    def test_case_and_whitespace_insensitive(self):
        assert parse_report("UPPER   LEFT\nLUNG") == (1, 0, 0, 0, 0, 0)

    def test_unparseable_text_gives_zero_label_and_warning(self):
        parsed = parse_report_detailed("the quick brown fox")
        assert parsed.label == (0, 0, 0, 0, 0, 0)
        assert parsed.warnings

    def test_status_mismatch_warns_but_zone_bits_win(self):
        parsed = parse_report_detailed(
            "Unilateral pulmonary infection, two infected areas, "
            "upper left lung and lower right lung."
        )
        assert parsed.label == (1, 0, 0, 0, 0, 1)
        assert any("unilateral" in w for w in parsed.warnings)

    def test_count_mismatch_warns(self):
        parsed = parse_report_detailed(
            "Bilateral pulmonary infection, five infected areas, "
            "upper left lung and lower right lung."
        )
        assert parsed.label == (1, 0, 0, 0, 0, 1)
        assert any("count" in w for w in parsed.warnings)

    def test_never_raises(self):
        for text in ("", ".", "lung lung lung", "no pulmonary infection, upper left lung"):
            parse_report(text)


def test_round_trip_all_64_labels():
    for label in all_labels():
        assert parse_report(synthesize_report(label)) == label


def test_synthesize_is_left_inverse_on_canonical_reports():
    for label in all_labels():
        report = synthesize_report(label)
        assert synthesize_report(parse_report(report)) == report


class TestEmbed:
    def test_empty_text_is_zero_vector(self):
        assert np.allclose(embed_report(""), 0.0)
        assert embed_report("").shape == (EMBED_DIM,)

    def test_identical_texts_identical_vectors(self):
        a = embed_report("upper left lung.")
        b = embed_report("upper left lung.")
        assert np.array_equal(a, b)

    def test_orthogonal_single_words_at_sqrt2(self):
        # disjoint one-token reports are orthogonal unit vectors
        d = np.linalg.norm(embed_report("left") - embed_report("right"))
        assert d == pytest.approx(np.sqrt(2.0), abs=1e-12)

    def test_distance_matches_bag_of_words_definition(self):
        # independent oracle: recompute normalized counts by hand
        r1 = "Unilateral pulmonary infection, one infected area, upper left lung."
        r2 = "Unilateral pulmonary infection, one infected area, upper right lung."
        def counts(text):
            vec = {}
            for tok in tokenize(text):
                vec[tok] = vec.get(tok, 0) + 1
            return vec
        c1, c2 = counts(r1), counts(r2)
        keys = sorted(set(c1) | set(c2))
        v1 = np.array([c1.get(k, 0) for k in keys], dtype=float)
        v2 = np.array([c2.get(k, 0) for k in keys], dtype=float)
        v1 /= np.linalg.norm(v1)
        v2 /= np.linalg.norm(v2)
        expected = np.linalg.norm(v1 - v2)
        got = np.linalg.norm(embed_report(r1) - embed_report(r2))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_oov_tokens_share_one_bucket(self):
        a = embed_report("zebra")
        b = embed_report("quokka")
        assert np.array_equal(a, b)
        assert a[-1] == 1.0


class TestPseudoLabelCorpus:
    def test_identity_on_synthesized_corpus(self):
        labels_in = all_labels()
        corpus = [synthesize_report(l) for l in labels_in for _ in range(10)]
        expected = [l for l in labels_in for _ in range(10)]
        labels, audit = pseudo_label_corpus(corpus, min_cluster_size=5)
        assert labels == expected
        assert audit.clustered

    def test_single_report_skips_clustering(self):
        labels, audit = pseudo_label_corpus(["No pulmonary infection."])
        assert labels == [(0, 0, 0, 0, 0, 0)]
        assert not audit.clustered
        assert "insufficient data" in audit.reason

    def test_two_template_families_have_pure_clusters(self):
        corpus = ["Unilateral pulmonary infection, one infected area, upper left lung."] * 20
        corpus += ["Unilateral pulmonary infection, one infected area, lower right lung."] * 20
        labels, audit = pseudo_label_corpus(corpus, min_cluster_size=5)
        assert audit.clustered
        assert audit.n_clusters == 2
        assert all(p == pytest.approx(1.0) for p in audit.cluster_purity.values())

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            pseudo_label_corpus([])


class TestRegions:
    def test_canonical_order(self):
        phrases = [r.phrase for r in REGIONS]
        assert phrases == [
            "upper left lung", "middle left lung", "lower left lung",
            "upper right lung", "middle right lung", "lower right lung",
        ]
        assert [r.index for r in REGIONS] == list(range(6))

    def test_zone_boxes_partition_the_image(self):
        size = 64
        cover = np.zeros((size, size), dtype=int)
        for region in REGIONS:
            r0, r1, c0, c1 = zone_box(region, size)
            cover[r0:r1, c0:c1] += 1
        assert np.all(cover == 1)

    def test_as_label_validation(self):
        assert as_label([1, 0, 1, 0, 0, 0]) == (1, 0, 1, 0, 0, 0)
        with pytest.raises(ValueError):
            as_label([1, 0])
        with pytest.raises(ValueError):
            as_label([2, 0, 0, 0, 0, 0])
