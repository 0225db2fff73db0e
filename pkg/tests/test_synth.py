import numpy as np
import pytest

from dtp.synth import (
    GeneratorConfig,
    GeneratorConfigError,
    IdentityRecord,
    caption,
    generate_stream,
    load_stream,
    nearest_centroid_accuracy,
    save_stream,
)


@pytest.fixture(scope="module")
def stream():
    return generate_stream(GeneratorConfig(), 0)


def test_caption_template():
    rec = IdentityRecord(0, (("black", "hair"), ("white", "T-shirts"), ("black", "shorts"), ("black", "shoes")), 0)
    assert caption(rec) == "The man has black hair, white T-shirts, black shorts, black shoes."
    assert caption(rec, "neutral").startswith("The person has")
    assert len(caption(rec).split(",")) == 4


def test_invalid_attribute_rejected():
    with pytest.raises(ValueError):
        IdentityRecord(0, (("black", "boots"),) * 4, 0)


def test_same_seed_is_bit_identical():
    cfg = GeneratorConfig(ids_per_domain=8, test_ids_per_domain=8, images_per_id=2)
    a, b = generate_stream(cfg, 3), generate_stream(cfg, 3)
    for da, db in zip(a.domains, b.domains):
        for name in ("train", "query", "gallery"):
            np.testing.assert_array_equal(getattr(da, name).regions, getattr(db, name).regions)
        assert da.captions == db.captions


def test_stream_shape(stream):
    assert [d.unseen for d in stream.domains] == [False, False, False, True]
    for d in stream.seen:
        assert len(d.train) == 16 * 32
        assert len(d.identities) == 16
    assert len(stream.unseen[0].train) == 0


def test_captions_depend_only_on_attributes(stream):
    for d in stream.domains:
        assert set(d.captions) == {r.identity_id for r in d.identities}
        for rec in d.identities:
            assert d.captions[rec.identity_id] == caption(rec)


def test_attribute_combinations_are_unique(stream):
    combos = [r.attributes for d in stream.domains for r in d.identities + d.test_identities]
    assert len(combos) == len(set(combos))


def test_domain_gap_at_least_shift_magnitude(stream):
    cfg = stream.config
    means = [np.concatenate([d.query.regions, d.gallery.regions]).mean(axis=0) for d in stream.domains]
    for i in range(len(means)):
        for j in range(i + 1, len(means)):
            assert np.linalg.norm(means[i] - means[j]) >= cfg.domain_shift


def test_identity_separability_floor(stream):
    for d in stream.seen:
        assert nearest_centroid_accuracy(d.train) >= 0.9
    for d in stream.domains:
        assert nearest_centroid_accuracy(d.gallery) >= 0.9


def test_query_gallery_protocol(stream):
    for d in stream.domains:
        assert set(d.query.identity_ids) == set(d.gallery.identity_ids)
        assert np.all(d.query.camera_ids == 0)
        train_ids = set(d.train.identity_ids.tolist())
        assert train_ids.isdisjoint(d.query.identity_ids.tolist())


def test_infeasible_configs_rejected():
    with pytest.raises(GeneratorConfigError):
        GeneratorConfig(n_seen_domains=1, n_unseen_domains=0).validate_feasible()
    with pytest.raises(GeneratorConfigError):
        GeneratorConfig(ids_per_domain=4).validate_feasible()
    with pytest.raises(GeneratorConfigError):
        GeneratorConfig(test_ids_per_domain=30000).validate_feasible()
    with pytest.raises(ValueError):
        GeneratorConfig(bogus=1)


def test_export_round_trip_is_bit_exact(tmp_path):
    cfg = GeneratorConfig(ids_per_domain=8, test_ids_per_domain=8, images_per_id=2)
    s = generate_stream(cfg, 1)
    save_stream(s, tmp_path / "s")
    t = load_stream(tmp_path / "s")
    assert t.seed == s.seed and t.config == s.config
    for a, b in zip(s.domains, t.domains):
        assert a.captions == b.captions and a.identities == b.identities and a.unseen == b.unseen
        for name in ("train", "query", "gallery"):
            sa, sb = getattr(a, name), getattr(b, name)
            assert sa.regions.tobytes() == sb.regions.tobytes()
            np.testing.assert_array_equal(sa.identity_ids, sb.identity_ids)
            np.testing.assert_array_equal(sa.camera_ids, sb.camera_ids)
