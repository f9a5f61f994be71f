"""Jacobian maps, region partitions, sample collection and pooling."""
import numpy as np
import pytest

from defield.defanalysis import (
    LABEL_G,
    LABEL_N,
    LABEL_R,
    LABEL_U,
    JacobianMap,
    RegionSamples,
    collect_samples,
    jacobian_map,
    partition_regions,
    pool,
    read_samples_csv,
    write_samples_csv,
)
from defield.grids import (
    GeometryMismatch,
    GridGeometry,
    Mask,
    ValidationError,
    VectorField,
    index_coords,
)
from defield.phantom import radial_gaussian_field
from defield.registration import compose

G12 = GridGeometry((12, 12, 12))
INTERIOR = (slice(1, -1),) * 3


def linear_field(geometry, matrix):
    """Displacement with phi(z) = M z, i.e. g = (I - M) z."""
    coords = index_coords(geometry)
    m = np.asarray(matrix, dtype=np.float64)
    mapped = np.einsum("kl,lxyz->kxyz", m, coords)
    return VectorField(geometry, (coords - mapped).astype(np.float32))


class TestJacobianMap:
    def test_zero_field_is_one(self):
        jm = jacobian_map(VectorField.zero(G12))
        assert np.allclose(jm.data, 1.0)

    def test_linear_scaling(self):
        jm = jacobian_map(linear_field(G12, 1.2 * np.eye(3)))
        assert np.allclose(jm.data[INTERIOR], 1.728, atol=1e-6)

    def test_general_linear_map(self):
        m = np.array([[1.1, 0.05, 0.0], [0.0, 0.9, 0.1], [0.02, 0.0, 1.0]])
        jm = jacobian_map(linear_field(G12, m))
        assert np.allclose(jm.data[INTERIOR], np.linalg.det(m), atol=1e-6)

    def test_radial_phantom_against_analytic(self):
        g = GridGeometry((48, 48, 48))
        field, analytic = radial_gaussian_field((23.5, 23.5, 23.5), -0.2, 9.0, g)
        jm = jacobian_map(field)
        rel = np.abs(jm.data[INTERIOR] / analytic.data[INTERIOR] - 1.0)
        assert rel.max() < 0.02

    def test_composition_multiplies_determinants(self):
        m1 = np.diag([1.05, 0.95, 1.0])
        m2 = np.diag([0.98, 1.02, 1.04])
        f = linear_field(G12, m1)
        g = linear_field(G12, m2)
        jm = jacobian_map(compose(f, g))
        expected = np.linalg.det(m1) * np.linalg.det(m2)
        inner = (slice(3, -3),) * 3
        assert np.allclose(jm.data[inner], expected, atol=1e-6)

    def test_small_grid_rejected(self):
        with pytest.raises(ValidationError):
            jacobian_map(VectorField.zero(GridGeometry((2, 12, 12))))


def box_mask(geometry, lo, hi):
    arr = np.zeros(geometry.dims, dtype=np.uint8)
    arr[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return Mask(geometry, arr)


class TestPartitionRegions:
    def test_identical_masks(self):
        m = box_mask(G12, (3, 3, 3), (7, 7, 7))
        part = partition_regions(m, m)
        assert np.array_equal(part.labels == LABEL_U, m.data.astype(bool))
        assert not (part.labels == LABEL_R).any()
        assert not (part.labels == LABEL_G).any()

    def test_disjoint_masks(self):
        a = box_mask(G12, (1, 1, 1), (4, 4, 4))
        b = box_mask(G12, (6, 6, 6), (9, 9, 9))
        part = partition_regions(a, b)
        assert not (part.labels == LABEL_U).any()
        assert np.array_equal(part.labels == LABEL_R, a.data.astype(bool))
        assert np.array_equal(part.labels == LABEL_G, b.data.astype(bool))

    def test_line_example(self):
        g = GridGeometry((8, 2, 2))
        warped = box_mask(g, (2, 0, 0), (5, 2, 2))   # x in {2,3,4}
        nxt = box_mask(g, (3, 0, 0), (6, 2, 2))      # x in {3,4,5}
        part = partition_regions(warped, nxt)
        xs = lambda code: sorted(set(np.argwhere(part.labels == code)[:, 0]))
        assert xs(LABEL_U) == [3, 4]
        assert xs(LABEL_R) == [2]
        assert xs(LABEL_G) == [5]

    def test_coverage_and_disjointness(self):
        rng = np.random.default_rng(5)
        a = Mask(G12, (rng.uniform(size=G12.dims) > 0.6).astype(np.uint8))
        b = Mask(G12, (rng.uniform(size=G12.dims) > 0.6).astype(np.uint8))
        part = partition_regions(a, b)
        # one label per voxel covering the grid
        assert part.labels.size == G12.n_voxels
        u = (part.labels == LABEL_U)
        r = (part.labels == LABEL_R)
        gx = (part.labels == LABEL_G)
        assert np.array_equal(u | r, a.data.astype(bool))
        assert np.array_equal(u | gx, b.data.astype(bool))

    def test_swap_symmetry_exchanges_r_and_g(self):
        rng = np.random.default_rng(6)
        a = Mask(G12, (rng.uniform(size=G12.dims) > 0.5).astype(np.uint8))
        b = Mask(G12, (rng.uniform(size=G12.dims) > 0.5).astype(np.uint8))
        ab = partition_regions(a, b)
        ba = partition_regions(b, a)
        assert np.array_equal(ab.labels == LABEL_U, ba.labels == LABEL_U)
        assert np.array_equal(ab.labels == LABEL_R, ba.labels == LABEL_G)
        assert np.array_equal(ab.labels == LABEL_G, ba.labels == LABEL_R)

    def test_geometry_mismatch(self):
        with pytest.raises(GeometryMismatch):
            partition_regions(box_mask(G12, (0, 0, 0), (2, 2, 2)),
                              box_mask(GridGeometry((12, 12, 13)), (0, 0, 0), (2, 2, 2)))


class TestCollectSamples:
    def test_unit_jacobian_means(self):
        jm = JacobianMap(G12, np.ones(G12.dims, dtype=np.float32))
        part = partition_regions(box_mask(G12, (2, 2, 2), (6, 6, 6)),
                                 box_mask(G12, (4, 4, 4), (8, 8, 8)))
        s = collect_samples(jm, part)
        for region in "URGN":
            assert s.mean(region) == pytest.approx(1.0)

    def test_empty_region_flagged(self):
        jm = JacobianMap(G12, np.ones(G12.dims, dtype=np.float32))
        m = box_mask(G12, (3, 3, 3), (7, 7, 7))
        s = collect_samples(jm, partition_regions(m, m))
        assert "R" in s.empty_regions() and "G" in s.empty_regions()
        assert s.mean("G") is None

    def test_region_specific_values(self):
        m = box_mask(G12, (3, 3, 3), (7, 7, 7))
        part = partition_regions(m, m)
        data = np.full(G12.dims, 0.5, dtype=np.float32)
        data[part.labels == LABEL_U] = 2.0
        s = collect_samples(JacobianMap(G12, data), part)
        assert s.mean("U") == pytest.approx(2.0)
        assert s.mean("N") == pytest.approx(0.5)

    def test_face_voxels_excluded(self):
        g = GridGeometry((4, 4, 4))
        jm = JacobianMap(g, np.ones(g.dims, dtype=np.float32))
        part = partition_regions(Mask(g, np.ones(g.dims, dtype=np.uint8)),
                                 Mask(g, np.ones(g.dims, dtype=np.uint8)))
        s = collect_samples(jm, part)
        assert s.counts()["U"] == 8  # only the 2x2x2 interior

    def test_nonpositive_samples_rejected(self):
        with pytest.raises(ValidationError):
            RegionSamples({"U": np.array([1.0, -0.5])})


class TestPool:
    def make(self, seed):
        rng = np.random.default_rng(seed)
        return RegionSamples({r: rng.uniform(0.5, 2.0, size=rng.integers(1, 20))
                              for r in "URGN"})

    def test_single_element_identity(self):
        s = self.make(0)
        p = pool([s])
        for region in "URGN":
            assert np.array_equal(p.samples[region], s.samples[region])

    def test_counts_additive(self):
        a, b = self.make(1), self.make(2)
        p = pool([a, b])
        for region in "URGN":
            assert p.counts()[region] == a.counts()[region] + b.counts()[region]

    def test_grand_mean_is_weighted_mean(self):
        a, b = self.make(3), self.make(4)
        p = pool([a, b])
        for region in "URGN":
            na, nb = a.counts()[region], b.counts()[region]
            expected = (a.mean(region) * na + b.mean(region) * nb) / (na + nb)
            assert p.mean(region) == pytest.approx(expected, rel=1e-12)

    def test_empty_list_rejected(self):
        with pytest.raises(ValidationError):
            pool([])


def test_samples_csv_roundtrip_byte_identical(tmp_path):
    rng = np.random.default_rng(9)
    s = RegionSamples({r: rng.uniform(0.5, 2.0, size=10) for r in "URGN"})
    p1, p2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
    write_samples_csv(p1, s)
    back = read_samples_csv(p1)
    for region in "URGN":
        assert np.array_equal(back.samples[region], s.samples[region])
    write_samples_csv(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
