"""Structure ingestion, domain splitting, dimer extraction and interface cropping.

Only alpha-carbon ATOM records are read; occupancy and B-factor columns are
ignored on input and written as constants on output.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from binderflow.geomcore import Complex, PointChain, interface_residues

CHAIN_LETTERS = string.ascii_uppercase + string.ascii_lowercase + string.digits

DIMER_CONTACT_DIST = 10.0
DIMER_MIN_CONTACTS = 4
SEED_INTERFACE_CUTOFF = 8.0
MAX_BINDER = 250
SPATIAL_CUTOFF = 15.0
MIN_TARGET = 50
MAX_TOTAL = 500


class PDBParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyStructureError(ValueError):
    pass


class NoInterfaceError(ValueError):
    pass


@dataclass(frozen=True)
class DomainAnnotation:
    ranges: tuple
    source_chain: object = 0

    def __post_init__(self):
        ranges = tuple((int(s), int(e)) for s, e in self.ranges)
        if not ranges:
            raise ValueError("a domain needs at least one range")
        for s, e in ranges:
            if s > e:
                raise ValueError(f"range start {s} exceeds end {e}")
        ordered = sorted(ranges)
        for (_, e1), (s2, _) in zip(ordered, ordered[1:]):
            if s2 <= e1:
                raise ValueError("domain ranges overlap")
        object.__setattr__(self, "ranges", ranges)


@dataclass(frozen=True, eq=False)
class CropResult:
    binder: PointChain
    target_chains: tuple
    seed_index: int
    binder_chain: int
    min_target_unmet: bool = False

    @property
    def total(self) -> int:
        return len(self.binder) + sum(len(c) for c in self.target_chains)

    def to_complex(self) -> Complex:
        return Complex((self.binder, *self.target_chains), binder_index=0)

    def to_pdb(self) -> str:
        return write_structure(self.to_complex())


def _chain_letter(idx: int) -> str:
    return CHAIN_LETTERS[idx % len(CHAIN_LETTERS)]


def parse_structure(data) -> Complex:
    """Parse alpha-carbon ATOM records into one PointChain per chain identifier.

    Chains keep their order of first appearance; ``chain_id`` is that order.
    Parsing stops at the end of the first MODEL.
    """
    text = data.decode("ascii", errors="replace") if isinstance(data, (bytes, bytearray)) else str(data)
    order: list = []
    per_chain: dict = {}
    n_atom = 0
    for line_no, line in enumerate(text.splitlines(), start=1):
        if line.startswith("ENDMDL"):
            break
        if not line.startswith("ATOM"):
            continue
        n_atom += 1
        if len(line) < 54:
            raise PDBParseError(line_no, f"ATOM record too short ({len(line)} columns)")
        if line[12:16].strip() != "CA":
            continue
        chain = line[21]
        try:
            resseq = int(line[22:26])
            xyz = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
        except ValueError as exc:
            raise PDBParseError(line_no, f"bad numeric field: {exc}") from None
        if not all(np.isfinite(xyz)):
            raise PDBParseError(line_no, "non-finite coordinate")
        if chain not in per_chain:
            order.append(chain)
            per_chain[chain] = ([], [], [])
        ids, coords, names = per_chain[chain]
        if ids and resseq <= ids[-1]:
            raise PDBParseError(line_no, f"residue {resseq} in chain {chain!r} is not increasing")
        ids.append(resseq)
        coords.append(xyz)
        names.append(line[17:20].strip() or "UNK")
    if n_atom == 0 or not order:
        raise EmptyStructureError("no alpha-carbon ATOM records found")
    chains = []
    for k, chain in enumerate(order):
        ids, coords, names = per_chain[chain]
        chains.append(PointChain(np.array(coords), tuple(ids), k, tuple(names)))
    return Complex(tuple(chains))


def write_structure(c: Complex, chain_names: Optional[Sequence[str]] = None) -> str:
    """Alpha-carbon-only PDB text; chains are lettered A, B, ... unless named."""
    lines = []
    serial = 1
    for k, chain in enumerate(c.chains):
        letter = chain_names[k] if chain_names is not None else _chain_letter(k)
        for i, (rid, xyz) in enumerate(zip(chain.residue_ids, chain.coords)):
            resname = chain.resnames[i] if chain.resnames is not None else "GLY"
            lines.append(
                "ATOM  %5d  CA  %3s %1s%4d    %8.3f%8.3f%8.3f%6.2f%6.2f           C"
                % (serial % 100000, resname[:3], letter, rid, xyz[0], xyz[1], xyz[2], 1.0, 0.0)
            )
            serial += 1
        lines.append("TER")
    lines.append("END")
    return "\n".join(lines) + "\n"


def split_domains(c: Complex, annotations: Sequence[DomainAnnotation]) -> Complex:
    """Turn each annotated domain into its own chain; unannotated residues are dropped."""
    out = []
    for d, ann in enumerate(annotations):
        src = ann.source_chain
        if isinstance(src, str):
            idx = CHAIN_LETTERS.index(src) if src in CHAIN_LETTERS else -1
        else:
            idx = int(src)
        if not 0 <= idx < len(c.chains):
            raise ValueError(f"domain {d}: unknown source chain {src!r}")
        chain = c.chains[idx]
        lo, hi = chain.residue_ids[0], chain.residue_ids[-1]
        for s, e in ann.ranges:
            if s < lo or e > hi:
                raise ValueError(f"domain {d}: range ({s}, {e}) outside chain residues [{lo}, {hi}]")
        ids = np.asarray(chain.residue_ids)
        keep = np.zeros(len(ids), dtype=bool)
        for s, e in ann.ranges:
            keep |= (ids >= s) & (ids <= e)
        if not keep.any():
            raise ValueError(f"domain {d}: ranges select no residues")
        out.append(chain.subset(np.flatnonzero(keep)).with_chain_id(d))
    if not out:
        raise ValueError("no domain annotations given")
    return Complex(tuple(out))


def extract_dimers(c: Complex, contact_dist: float = DIMER_CONTACT_DIST, min_contacts: int = DIMER_MIN_CONTACTS):
    """Chain pairs (i, j), i < j, where each side has ``min_contacts`` residues near the other."""
    if contact_dist <= 0:
        raise ValueError("contact_dist must be positive")
    if min_contacts < 1:
        raise ValueError("min_contacts must be at least 1")
    pairs = []
    for i in range(len(c.chains)):
        for j in range(i + 1, len(c.chains)):
            ia, ib = interface_residues(c.chains[i], c.chains[j], contact_dist)
            if len(ia) >= min_contacts and len(ib) >= min_contacts:
                pairs.append((i, j))
    return pairs


def _contiguous_runs(indices: np.ndarray):
    runs = []
    start = prev = None
    for i in indices.tolist():
        if start is None:
            start = prev = i
        elif i == prev + 1:
            prev = i
        else:
            runs.append((start, prev))
            start = prev = i
    if start is not None:
        runs.append((start, prev))
    return runs


def crop_complex(
    c: Complex,
    rng_seed: int,
    max_binder: int = MAX_BINDER,
    spatial_cutoff: float = SPATIAL_CUTOFF,
    min_target: int = MIN_TARGET,
    max_total: int = MAX_TOTAL,
    interface_cutoff: float = SEED_INTERFACE_CUTOFF,
) -> CropResult:
    """Seeded three-stage interface crop.

    1. pick a binder seed uniformly among interface residues; its chain is the binder;
    2. take a contiguous binder window of length ``Uniform{1..max_binder}`` containing the seed;
    3. keep target residues within ``spatial_cutoff`` of the window, choosing whole
       contiguous stretches closest-first and trimming the last one from its far end
       so that the total stays within ``max_total``.
    """
    if len(c.chains) < 2:
        raise ValueError("cropping needs at least two chains")
    if max_binder < 1 or max_total < 1 or min_target < 0:
        raise ValueError("invalid crop budget")
    rng = np.random.default_rng(rng_seed)

    seeds = []
    for ci, chain in enumerate(c.chains):
        others = [o.coords for k, o in enumerate(c.chains) if k != ci]
        ia, _ = interface_residues(chain, np.concatenate(others), interface_cutoff)
        seeds.extend((ci, i) for i in sorted(ia))
    if not seeds:
        raise NoInterfaceError(f"no interface residues within {interface_cutoff} A")
    bchain_idx, seed = seeds[int(rng.integers(len(seeds)))]
    bchain = c.chains[bchain_idx]
    n = len(bchain)

    cap = min(max_binder, n, max_total)
    if max_total - min_target >= 1:
        cap = min(cap, max_total - min_target)
    length = int(rng.integers(1, cap + 1))
    lo_start, hi_start = max(0, seed - length + 1), min(seed, n - length)
    start = int(rng.integers(lo_start, hi_start + 1))
    window = np.arange(start, start + length)
    binder = bchain.subset(window)

    budget = max_total - length
    targets = [(k, ch) for k, ch in enumerate(c.chains) if k != bchain_idx]
    dists = {k: cdist(ch.coords, binder.coords).min(axis=1) for k, ch in targets}
    cands = {k: np.flatnonzero(dists[k] <= spatial_cutoff) for k, _ in targets}
    n_cand = sum(len(v) for v in cands.values())

    keep = {k: set() for k, _ in targets}
    if n_cand <= budget:
        for k, _ in targets:
            keep[k].update(cands[k].tolist())
    else:
        stretches = []
        for k, _ in targets:
            for a, b in _contiguous_runs(cands[k]):
                stretches.append((float(dists[k][a : b + 1].min()), k, a, b))
        stretches.sort()
        left = budget
        for _, k, a, b in stretches:
            if left == 0:
                break
            size = b - a + 1
            if size > left:
                d = dists[k]
                while b - a + 1 > left:
                    if d[a] > d[b]:
                        a += 1
                    else:
                        b -= 1
                size = b - a + 1
            keep[k].update(range(a, b + 1))
            left -= size
    target_chains = tuple(ch.subset(sorted(keep[k])) for k, ch in targets if keep[k])
    kept_total = sum(len(v) for v in keep.values())
    return CropResult(
        binder=binder,
        target_chains=target_chains,
        seed_index=int(seed - start),
        binder_chain=bchain_idx,
        min_target_unmet=kept_total < min_target,
    )


def synthetic_chain(rng: np.random.Generator, n: int, start=None, step: float = 3.8, chain_id: int = 0) -> PointChain:
    """Self-avoiding-ish random walk with fixed step length, as a stand-in CA trace."""
    pos = np.zeros((n, 3))
    pos[0] = rng.uniform(-5, 5, 3) if start is None else start
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    for i in range(1, n):
        direction = direction + 0.6 * rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        pos[i] = pos[i - 1] + step * direction
    return PointChain.from_coords(pos, chain_id=chain_id)


def synthetic_complex(rng: np.random.Generator, lengths: Sequence[int], spread: float = 6.0) -> Complex:
    """Compact random chains packed around the origin, scaled to overlap at interfaces."""
    chains = []
    for k, n in enumerate(lengths):
        ch = synthetic_chain(rng, n, chain_id=k)
        coords = ch.coords - ch.coords.mean(axis=0)
        rg = np.sqrt((coords**2).sum(axis=1).mean())
        coords = coords * (spread * n ** (1 / 3) / max(rg, 1e-9)) + rng.uniform(-spread, spread, 3)
        chains.append(PointChain.from_coords(coords, chain_id=k))
    return Complex(tuple(chains))
