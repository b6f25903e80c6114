"""Tests for the nearest-neighbour lookup-table baseline."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poselab.errors import DataError, MissingClass, ShapeMismatch
from poselab.models.geometry import BoundingBox
from poselab.services.geometry import projective_centre, random_rotations
from poselab.services.lut import Codebook, build_codebook, lut_estimate, nearest_entry


def _codebook(rng: np.random.Generator, size: int = 30, dim: int = 6) -> Codebook:
    return build_codebook(
        rng.standard_normal((size, dim)),
        rng.integers(1, 4, size),
        random_rotations(size, rng),
        rng.uniform(0.5, 1.5, size),
    )


def _brute_force(mu: np.ndarray, object_id: int, codebook: Codebook) -> int:
    best, best_sim = -1, -np.inf
    for i, (entry, obj) in enumerate(zip(codebook.mu.astype(float), codebook.object_ids)):
        if obj != object_id:
            continue
        sim = entry @ mu / (np.linalg.norm(entry) * np.linalg.norm(mu))
        if sim > best_sim:
            best, best_sim = i, sim
    return best


def test_nearest_entry_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        codebook = _codebook(rng)
        mu = rng.standard_normal(codebook.latent_dim)
        object_id = int(codebook.object_ids[0])
        assert nearest_entry(mu, object_id, codebook) == _brute_force(mu, object_id, codebook)


def test_exact_member_is_its_own_nearest_entry():
    rng = np.random.default_rng(1)
    codebook = _codebook(rng)
    for index in range(len(codebook)):
        mu = codebook.mu[index]
        assert nearest_entry(mu, int(codebook.object_ids[index]), codebook) == index


def test_orthogonal_entries():
    codebook = build_codebook(
        np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1, 1]),
        np.stack([np.eye(3)] * 2), np.array([0.6, 0.9]),
    )
    assert nearest_entry(np.array([0.9, 0.1]), 1, codebook) == 0
    assert nearest_entry(np.array([0.1, 0.9]), 1, codebook) == 1


def test_ties_go_to_the_lowest_index():
    codebook = build_codebook(
        np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]), np.array([2, 1, 1]),
        np.stack([np.eye(3)] * 3), np.ones(3),
    )
    assert nearest_entry(np.array([3.0, 3.0]), 1, codebook) == 1


def test_lookup_is_restricted_to_the_query_class():
    codebook = build_codebook(
        np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1, 2]),
        np.stack([np.eye(3)] * 2), np.ones(2),
    )
    assert nearest_entry(np.array([1.0, 0.0]), 2, codebook) == 1


@given(st.floats(0.01, 1000))
def test_query_scale_does_not_matter(scale):
    codebook = _codebook(np.random.default_rng(2))
    mu = np.random.default_rng(3).standard_normal(codebook.latent_dim)
    object_id = int(codebook.object_ids[0])
    assert nearest_entry(scale * mu, object_id, codebook) == nearest_entry(mu, object_id, codebook)


def test_missing_class_and_shape_errors():
    codebook = _codebook(np.random.default_rng(4))
    with pytest.raises(MissingClass):
        nearest_entry(np.ones(codebook.latent_dim), 99, codebook)
    with pytest.raises(ShapeMismatch):
        nearest_entry(np.ones(codebook.latent_dim + 1), 1, codebook)


def test_empty_codebook():
    with pytest.raises(DataError):
        build_codebook(np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3, 3)), np.zeros(0))


def test_zero_query_does_not_crash():
    codebook = _codebook(np.random.default_rng(5))
    object_id = int(codebook.object_ids[0])
    index = nearest_entry(np.zeros(codebook.latent_dim), object_id, codebook)
    assert codebook.object_ids[index] == object_id


def test_lut_estimate_copies_rotation_and_distance(intrinsics):
    rng = np.random.default_rng(6)
    codebook = _codebook(rng)
    index = 4
    bbox = BoundingBox(bx=30, by=20, w=40, h=30)
    pose = lut_estimate(
        codebook.mu[index], int(codebook.object_ids[index]), bbox, intrinsics, codebook
    )
    assert np.allclose(pose.R, codebook.rotations[index])
    assert pose.t[2] == pytest.approx(codebook.tz[index])
    centre = projective_centre(pose.t, intrinsics)
    assert (centre.cx, centre.cy) == pytest.approx(bbox.centre)


def test_codebook_save_load(tmp_path):
    codebook = _codebook(np.random.default_rng(7))
    loaded = Codebook.load(codebook.save(tmp_path / "lut.codebook"))
    assert np.array_equal(loaded.mu, codebook.mu)
    assert np.array_equal(loaded.object_ids, codebook.object_ids)
    assert np.allclose(loaded.rotations, codebook.rotations)
    assert loaded.counts() == codebook.counts()
