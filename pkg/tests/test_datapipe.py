import numpy as np
import pytest

from binderflow.datapipe import (
    DomainAnnotation,
    EmptyStructureError,
    NoInterfaceError,
    PDBParseError,
    crop_complex,
    extract_dimers,
    parse_structure,
    split_domains,
    synthetic_complex,
    write_structure,
)
from binderflow.geomcore import Complex, PointChain

MINIMAL = """\
HEADER    TEST
ATOM      1  N   ALA A   1      11.104   6.134  -6.504  1.00  0.00           N
ATOM      2  CA  ALA A   1      11.639   6.071  -5.147  1.00  0.00           C
ATOM      3  CA  GLY A   2      14.000   6.000  -5.000  1.00  0.00           C
ATOM      4  CA  SER A   3      16.500   7.250  -3.125  1.00  0.00           C
END
"""


def line_chain(n, offset=(0, 0, 0), spacing=3.8, chain_id=0, start=1):
    coords = np.zeros((n, 3))
    coords[:, 0] = np.arange(n) * spacing
    return PointChain.from_coords(coords + offset, chain_id=chain_id, start=start)


class TestParse:
    def test_minimal(self):
        c = parse_structure(MINIMAL.encode())
        assert len(c.chains) == 1
        assert len(c.chains[0]) == 3
        assert c.chains[0].residue_ids == (1, 2, 3)
        np.testing.assert_allclose(c.chains[0].coords[0], [11.639, 6.071, -5.147])
        assert c.chains[0].resnames == ("ALA", "GLY", "SER")

    def test_two_chains_in_order(self):
        text = MINIMAL.replace("CA  SER A", "CA  SER B").replace("CA  GLY A", "CA  GLY B")
        text = text.replace(" CA  ALA A", " CA  ALA B")
        lines = [
            "ATOM      1  CA  ALA A   1       0.000   0.000   0.000  1.00  0.00           C",
            "ATOM      2  CA  ALA B   1       1.000   0.000   0.000  1.00  0.00           C",
            "ATOM      3  CA  ALA A   2       2.000   0.000   0.000  1.00  0.00           C",
        ]
        c = parse_structure("\n".join(lines))
        assert [len(ch) for ch in c.chains] == [2, 1]
        assert [ch.chain_id for ch in c.chains] == [0, 1]

    def test_malformed_names_line(self):
        bad = MINIMAL.replace("14.000", "14.0x0")
        with pytest.raises(PDBParseError) as err:
            parse_structure(bad)
        assert err.value.line_no == 4
        assert "line 4" in str(err.value)

    def test_short_record(self):
        with pytest.raises(PDBParseError):
            parse_structure("ATOM      1  CA  ALA A   1       0.000")

    def test_empty(self):
        with pytest.raises(EmptyStructureError):
            parse_structure("HEADER nothing\nEND\n")

    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        c = Complex(
            tuple(
                PointChain(rng.uniform(-99, 99, (n, 3)), tuple(sorted(rng.choice(900, n, replace=False) + 1)), k)
                for k, n in enumerate([5, 9, 3])
            )
        )
        back = parse_structure(write_structure(c).encode())
        assert len(back.chains) == 3
        for a, b in zip(c.chains, back.chains):
            assert a.residue_ids == b.residue_ids
            assert np.abs(a.coords - b.coords).max() <= 1e-3 / 2 + 1e-12


class TestSplitDomains:
    def test_identity(self):
        ch = line_chain(30)
        out = split_domains(Complex((ch,)), [DomainAnnotation(((1, 30),), 0)])
        assert out.chains[0] == ch

    def test_two_domains(self):
        ch = line_chain(100)
        out = split_domains(Complex((ch,)), [DomainAnnotation(((1, 40),)), DomainAnnotation(((61, 100),))])
        assert [len(x) for x in out.chains] == [40, 40]
        assert out.chains[1].residue_ids[0] == 61

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            split_domains(Complex((line_chain(10),)), [DomainAnnotation(((5, 11),))])

    def test_overlapping_ranges_rejected(self):
        with pytest.raises(ValueError):
            DomainAnnotation(((1, 10), (10, 20)))

    def test_membership_oracle(self):
        rng = np.random.default_rng(4)
        chains = tuple(line_chain(60, (0, 10 * k, 0), chain_id=k) for k in range(2))
        c = Complex(chains)
        for _ in range(20):
            anns = []
            for _ in range(rng.integers(1, 4)):
                src = int(rng.integers(2))
                cuts = np.sort(rng.choice(np.arange(1, 61), 4, replace=False))
                anns.append(DomainAnnotation(((cuts[0], cuts[1]), (cuts[2], cuts[3])), src))
            out = split_domains(c, anns)
            for d, ann in enumerate(anns):
                src = chains[ann.source_chain]
                expect = [
                    i for i, rid in enumerate(src.residue_ids) if any(s <= rid <= e for s, e in ann.ranges)
                ]
                assert out.chains[d].residue_ids == tuple(src.residue_ids[i] for i in expect)
                np.testing.assert_array_equal(out.chains[d].coords, src.coords[expect])


def brute_dimers(c, dist, k):
    out = []
    for i in range(len(c.chains)):
        for j in range(i + 1, len(c.chains)):
            a, b = c.chains[i].coords, c.chains[j].coords
            na = sum(1 for p in a if min(np.linalg.norm(p - q) for q in b) <= dist)
            nb = sum(1 for q in b if min(np.linalg.norm(p - q) for p in a) <= dist)
            if na >= k and nb >= k:
                out.append((i, j))
    return out


class TestDimers:
    def test_interdigitated(self):
        a = line_chain(10, spacing=4.0)
        b = line_chain(10, (2.0, 0, 0), spacing=4.0, chain_id=1)
        assert extract_dimers(Complex((a, b))) == [(0, 1)]

    def test_far(self):
        assert extract_dimers(Complex((line_chain(10), line_chain(10, (0, 50, 0))))) == []

    def test_single_chain(self):
        assert extract_dimers(Complex((line_chain(5),))) == []

    def test_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            c = synthetic_complex(rng, [15, 20, 12, 18], spread=5.0)
            assert extract_dimers(c, 10.0, 4) == brute_dimers(c, 10.0, 4)

    def test_symmetric_under_reordering(self):
        rng = np.random.default_rng(8)
        c = synthetic_complex(rng, [15, 20, 12, 18], spread=5.0)
        perm = [2, 0, 3, 1]
        c2 = Complex(tuple(c.chains[p] for p in perm))
        mapped = sorted(tuple(sorted((perm[i], perm[j]))) for i, j in extract_dimers(c2))
        assert mapped == extract_dimers(c)


class TestCrop:
    def test_small_complex(self):
        a = line_chain(60, spacing=3.8)
        b = line_chain(60, (0, 5.0, 0), spacing=3.8, chain_id=1)
        for seed in range(20):
            res = crop_complex(Complex((a, b)), seed)
            assert res.total <= 120
            assert 0 <= res.seed_index < len(res.binder)

    def test_budget_sweep(self):
        rng = np.random.default_rng(0)
        c = synthetic_complex(rng, [400, 400], spread=4.0)
        for seed in range(1000):
            res = crop_complex(c, seed)
            assert res.total <= 500
            assert 1 <= len(res.binder) <= 250
            assert 0 <= res.seed_index < len(res.binder)

    def test_determinism(self):
        c = synthetic_complex(np.random.default_rng(1), [120, 90, 80], spread=4.0)
        assert crop_complex(c, 42).to_pdb() == crop_complex(c, 42).to_pdb()

    def test_no_interface(self):
        with pytest.raises(NoInterfaceError):
            crop_complex(Complex((line_chain(10), line_chain(10, (0, 80, 0)))), 0)

    def test_target_stretches_contiguous_and_near(self):
        c = synthetic_complex(np.random.default_rng(2), [300, 500], spread=3.0)
        res = crop_complex(c, 3, max_total=120)
        assert res.total <= 120
        for ch in res.target_chains:
            src = c.chains[ch.chain_id]
            d = np.linalg.norm(ch.coords[:, None] - res.binder.coords[None], axis=-1).min(1)
            assert d.max() <= 15.0
            assert set(ch.residue_ids) <= set(src.residue_ids)
