"""Simulated single-cell perturbation environment and its dataset format.

Each episode is one cell.  At reset a knockout or overexpression is drawn
for one gene, the hidden post-perturbation profile is computed through a
linear regulatory matrix, and the agent then nudges its predicted profile
towards that target.  The reward of a step is the drop in MSE it caused, so
episode rewards telescope.

Dataset files (``trpoppo-expression v1``) are comma-separated text::

    # trpoppo-expression v1
    # modality=RNA
    cell_id,pseudotime,split,GENE_A,GENE_B,...
    c0000,0.1250,TRAIN,1.02,0.33,...

Lines starting with ``#`` before the header are tags; the version tag is
mandatory.  ``split`` is TRAIN or TEST, pseudotime lies in [0, 1] and every
value must be finite.  An optional regulatory matrix sits next to the file
as ``<stem>.grn.csv``: a header of feature names, then one row per affected
feature, where entry (i, j) is the shift of feature i per unit change of
feature j.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

FORMAT_TAG = "trpoppo-expression v1"
MODALITIES = ("RNA", "ATAC", "JOINT")
SPLITS = ("TRAIN", "TEST")


class DataError(ValueError):
    pass


class EpisodeError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ExpressionDataset:
    matrix: np.ndarray
    gene_names: Tuple[str, ...]
    cell_ids: Tuple[str, ...]
    modality: str
    pseudotime: np.ndarray
    split: Tuple[str, ...]
    regulatory: Optional[np.ndarray] = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        n_cells, n_genes = m.shape
        if len(self.gene_names) != n_genes or len(self.cell_ids) != n_cells:
            raise DataError("names do not match matrix dimensions")
        if len(self.split) != n_cells or np.shape(self.pseudotime) != (n_cells,):
            raise DataError("per-cell columns do not match matrix rows")
        bad = np.argwhere(~np.isfinite(m))
        if bad.size:
            r, c = bad[0]
            raise DataError(f"non-finite value at cell {self.cell_ids[r]!r}, gene {self.gene_names[c]!r}")
        pt = np.asarray(self.pseudotime, dtype=np.float64)
        if np.any(~np.isfinite(pt)) or np.any((pt < 0) | (pt > 1)):
            raise DataError("pseudotime must lie in [0, 1]")
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")
        for s in self.split:
            if s not in SPLITS:
                raise DataError(f"unknown split {s!r}")
        if self.regulatory is not None and np.shape(self.regulatory) != (n_genes, n_genes):
            raise DataError("regulatory matrix must be genes x genes")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "pseudotime", pt)

    @property
    def n_cells(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_genes(self) -> int:
        return self.matrix.shape[1]

    def cells_in(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.split) if s == split], dtype=np.int64)

    def subset_cells(self, split: str) -> "ExpressionDataset":
        idx = self.cells_in(split)
        return ExpressionDataset(
            self.matrix[idx],
            self.gene_names,
            tuple(self.cell_ids[i] for i in idx),
            self.modality,
            self.pseudotime[idx],
            tuple(self.split[i] for i in idx),
            self.regulatory,
        )


# -- file format ----------------------------------------------------------------


def grn_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".grn.csv")


def write_dataset(path: Union[str, Path], ds: ExpressionDataset) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {FORMAT_TAG}\n# modality={ds.modality}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "pseudotime", "split", *ds.gene_names])
        for i in range(ds.n_cells):
            w.writerow([ds.cell_ids[i], repr(float(ds.pseudotime[i])), ds.split[i], *(repr(float(x)) for x in ds.matrix[i])])
    if ds.regulatory is not None:
        with open(grn_path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ds.gene_names)
            for row in ds.regulatory:
                w.writerow([repr(float(x)) for x in row])


def _read_one(path: Path) -> ExpressionDataset:
    if not path.exists():
        raise DataError(f"{path}: no such file")
    tags = {}
    seen_version = False
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body_start = 0
    for body_start, line in enumerate(lines):
        if not line.startswith("#"):
            break
        tag = line[1:].strip()
        if tag == FORMAT_TAG:
            seen_version = True
        elif "=" in tag:
            k, v = tag.split("=", 1)
            tags[k.strip()] = v.strip()
    else:
        body_start = len(lines)
    if not seen_version:
        raise DataError(f"{path}: missing '# {FORMAT_TAG}' tag")
    rows = list(csv.reader(lines[body_start:]))
    if not rows:
        raise DataError(f"{path}: missing header row")
    header = rows[0]
    if header[:3] != ["cell_id", "pseudotime", "split"] or len(header) < 4:
        raise DataError(f"{path}: header must start with cell_id,pseudotime,split and name >= 1 gene")
    genes = tuple(header[3:])
    if len(set(genes)) != len(genes):
        raise DataError(f"{path}: duplicate gene names in header")
    cell_ids, pt, split, values = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=body_start + 2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        cid = row[0]
        try:
            t = float(row[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: cell {cid!r} has bad pseudotime {row[1]!r}") from None
        if not (0.0 <= t <= 1.0):
            raise DataError(f"{path}:{lineno}: cell {cid!r} pseudotime {t} outside [0, 1]")
        if row[2] not in SPLITS:
            raise DataError(f"{path}:{lineno}: cell {cid!r} has split {row[2]!r}")
        vals = []
        for gene, raw in zip(genes, row[3:]):
            try:
                x = float(raw)
            except ValueError:
                raise DataError(f"{path}:{lineno}: cell {cid!r}, gene {gene!r}: not a number ({raw!r})") from None
            if not np.isfinite(x):
                raise DataError(f"{path}:{lineno}: cell {cid!r}, gene {gene!r}: non-finite value")
            vals.append(x)
        cell_ids.append(cid)
        pt.append(t)
        split.append(row[2])
        values.append(vals)
    if not values:
        raise DataError(f"{path}: no cells")
    if len(set(cell_ids)) != len(cell_ids):
        raise DataError(f"{path}: duplicate cell ids")
    regulatory = None
    gp = grn_path(path)
    if gp.exists():
        grn_rows = list(csv.reader(gp.read_text().splitlines()))
        if tuple(grn_rows[0]) != genes or len(grn_rows) - 1 != len(genes):
            raise DataError(f"{gp}: regulatory matrix does not match {path} features")
        regulatory = np.array([[float(x) for x in r] for r in grn_rows[1:]])
    return ExpressionDataset(
        np.array(values), genes, tuple(cell_ids), tags.get("modality", "RNA"), np.array(pt), tuple(split), regulatory
    )


def _join(rna: ExpressionDataset, atac: ExpressionDataset) -> ExpressionDataset:
    if set(rna.cell_ids) != set(atac.cell_ids):
        missing = sorted(set(rna.cell_ids) ^ set(atac.cell_ids))
        raise DataError(f"cell ids not aligned across modalities, e.g. {missing[:3]}")
    pos = {c: i for i, c in enumerate(atac.cell_ids)}
    order = np.array([pos[c] for c in rna.cell_ids])
    for i, c in enumerate(rna.cell_ids):
        j = order[i]
        if rna.split[i] != atac.split[j] or rna.pseudotime[i] != atac.pseudotime[j]:
            raise DataError(f"cell {c!r}: split/pseudotime differ between modalities")
    genes = tuple(f"RNA:{g}" for g in rna.gene_names) + tuple(f"ATAC:{g}" for g in atac.gene_names)
    regulatory = None
    if rna.regulatory is not None or atac.regulatory is not None:
        n1, n2 = rna.n_genes, atac.n_genes
        regulatory = np.zeros((n1 + n2, n1 + n2))
        if rna.regulatory is not None:
            regulatory[:n1, :n1] = rna.regulatory
        if atac.regulatory is not None:
            regulatory[n1:, n1:] = atac.regulatory
    return ExpressionDataset(
        np.hstack([rna.matrix, atac.matrix[order]]),
        genes,
        rna.cell_ids,
        "JOINT",
        rna.pseudotime,
        rna.split,
        regulatory,
    )


def load_dataset(
    path: Union[str, Path, Sequence[Union[str, Path]]],
    modality: str = "RNA",
    split: Optional[str] = None,
) -> ExpressionDataset:
    """Load and validate a dataset.

    For ``JOINT``, ``path`` may be a JOINT-tagged file, a (rna, atac) pair of
    files, or a directory holding ``rna.csv`` and ``atac.csv``; the matrices
    are concatenated column-wise after aligning cells by id.
    """
    modality = modality.upper()
    if modality not in MODALITIES:
        raise DataError(f"unknown modality {modality!r}")
    if modality == "JOINT" and not isinstance(path, (str, Path)):
        rna_p, atac_p = path
        ds = _join(_read_one(Path(rna_p)), _read_one(Path(atac_p)))
    elif modality == "JOINT" and Path(path).is_dir():
        ds = _join(_read_one(Path(path) / "rna.csv"), _read_one(Path(path) / "atac.csv"))
    else:
        ds = _read_one(Path(path))
        if ds.modality != modality:
            raise DataError(f"{path}: file is tagged {ds.modality}, requested {modality}")
    if split is not None:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        ds = ds.subset_cells(split)
    return ds


def synthesize_dataset(
    seed: int,
    n_cells: int = 200,
    n_genes: int = 32,
    regulatory_density: float = 0.1,
    modality: str = "RNA",
    test_fraction: float = 0.25,
) -> ExpressionDataset:
    """Seeded log-normal baselines with a sparse random regulatory matrix.

    Baseline of gene g in a cell at pseudotime t is
    ``exp(mu_g + slope_g * t + 0.25 * z)``; regulatory weights are N(0, 0.5^2)
    on a Bernoulli(density) off-diagonal mask.
    """
    if n_cells < 1 or n_genes < 1:
        raise ValueError("n_cells and n_genes must be >= 1")
    if not 0.0 <= regulatory_density <= 1.0:
        raise ValueError("regulatory_density must lie in [0, 1]")
    modality = modality.upper()
    rng = np.random.default_rng(seed)
    pseudotime = rng.uniform(0.0, 1.0, n_cells)
    mu = rng.normal(-0.2, 0.4, n_genes)
    slope = rng.normal(0.0, 0.5, n_genes)
    matrix = np.exp(mu[None, :] + slope[None, :] * pseudotime[:, None] + 0.25 * rng.standard_normal((n_cells, n_genes)))
    mask = rng.uniform(size=(n_genes, n_genes)) < regulatory_density
    np.fill_diagonal(mask, False)
    regulatory = np.where(mask, rng.normal(0.0, 0.5, (n_genes, n_genes)), 0.0)
    n_test = int(round(test_fraction * n_cells))
    if n_cells > 1:
        n_test = min(max(n_test, 1), n_cells - 1)
    else:
        n_test = 0
    test = set(rng.permutation(n_cells)[:n_test].tolist())
    prefix = "p" if modality == "ATAC" else "g"
    return ExpressionDataset(
        matrix,
        tuple(f"{prefix}{i:03d}" for i in range(n_genes)),
        tuple(f"c{i:05d}" for i in range(n_cells)),
        modality,
        pseudotime,
        tuple("TEST" if i in test else "TRAIN" for i in range(n_cells)),
        regulatory,
    )


# -- perturbations ------------------------------------------------------------


class PerturbationKind(enum.IntEnum):
    KNOCKOUT = 0
    OVEREXPRESS = 1


@dataclass(frozen=True)
class PerturbationSpec:
    kind: PerturbationKind
    target: int
    magnitude: float = 1.0

    def __post_init__(self):
        if self.kind == PerturbationKind.OVEREXPRESS and not self.magnitude > 0:
            raise ValueError("overexpression magnitude must be > 0")


@dataclass(frozen=True)
class EnvConfig:
    episode_length: int = 8
    action_scale: float = 0.5
    noise_std: float = 0.05
    knockout_floor: float = 0.0
    overexpress_low: float = 1.5
    overexpress_high: float = 3.0
    gene_subset: int = 32
    knockout_prob: float = 0.5

    def __post_init__(self):
        if self.episode_length < 1 or self.gene_subset < 1:
            raise ValueError("episode_length and gene_subset must be >= 1")
        if self.action_scale <= 0 or self.noise_std < 0 or self.knockout_floor < 0:
            raise ValueError("action_scale must be > 0; noise_std and knockout_floor >= 0")
        if not 0 < self.overexpress_low <= self.overexpress_high:
            raise ValueError("need 0 < overexpress_low <= overexpress_high")
        if not 0.0 <= self.knockout_prob <= 1.0:
            raise ValueError("knockout_prob must lie in [0, 1]")


def apply_perturbation(
    profile: np.ndarray,
    spec: PerturbationSpec,
    config: EnvConfig,
    rng: Optional[np.random.Generator] = None,
    regulatory: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Post-perturbation profile: direct change on the target gene, its linear
    propagation ``regulatory[:, g] * change`` and additive Gaussian noise."""
    profile = np.asarray(profile, dtype=np.float64)
    g = int(spec.target)
    if not 0 <= g < profile.size:
        raise IndexError(f"target gene {g} outside 0..{profile.size - 1}")
    if spec.kind == PerturbationKind.KNOCKOUT:
        new = config.knockout_floor * profile[g]
    else:
        new = spec.magnitude * profile[g]
    change = new - profile[g]
    target = profile.copy()
    if regulatory is not None:
        target += regulatory[:, g] * change
    target[g] = new + (regulatory[g, g] * change if regulatory is not None else 0.0)
    if config.noise_std > 0:
        if rng is None:
            raise ValueError("noise_std > 0 needs a random generator")
        target += rng.normal(0.0, config.noise_std, size=target.size)
    return target


def sample_perturbation(rng: np.random.Generator, n_genes: int, config: EnvConfig) -> PerturbationSpec:
    kind = PerturbationKind.KNOCKOUT if rng.uniform() < config.knockout_prob else PerturbationKind.OVEREXPRESS
    target = int(rng.integers(n_genes))
    if kind == PerturbationKind.OVEREXPRESS:
        return PerturbationSpec(kind, target, float(rng.uniform(config.overexpress_low, config.overexpress_high)))
    return PerturbationSpec(kind, target, 1.0)


def select_genes(ds: ExpressionDataset, k: int) -> np.ndarray:
    """Indices of the ``k`` highest-variance features, in column order."""
    if k > ds.n_genes:
        raise ValueError(f"gene_subset {k} exceeds {ds.n_genes} features")
    var = ds.matrix.var(axis=0)
    order = np.argsort(-var, kind="stable")[:k]
    return np.sort(order)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a) - np.asarray(b)
    return float(np.mean(d * d))


@dataclass
class EnvState:
    cell: int
    baseline: np.ndarray
    prediction: np.ndarray
    perturbation: PerturbationSpec
    encoding: np.ndarray
    pseudotime: float
    target: np.ndarray
    steps: int = 0
    done: bool = False
    rewards: list = field(default_factory=list)


class PerturbEnv:
    """Episode = one cell of ``split``; actions adjust the predicted profile."""

    def __init__(
        self,
        dataset: ExpressionDataset,
        config: EnvConfig = EnvConfig(),
        split: str = "TRAIN",
        seed: Optional[int] = 0,
    ):
        self.dataset = dataset
        self.config = config
        self.split = split
        self.genes = select_genes(dataset, min(config.gene_subset, dataset.n_genes))
        self.cells = dataset.cells_in(split)
        if self.cells.size == 0:
            raise DataError(f"no cells in split {split}")
        self.regulatory = None
        if dataset.regulatory is not None:
            self.regulatory = dataset.regulatory[np.ix_(self.genes, self.genes)]
        self.rng = np.random.default_rng(seed)
        self.state: Optional[EnvState] = None

    @property
    def n_genes(self) -> int:
        return int(self.genes.size)

    @property
    def obs_dim(self) -> int:
        return 3 * self.n_genes + 1

    @property
    def act_dim(self) -> int:
        return self.n_genes

    def observation(self) -> np.ndarray:
        s = self.state
        if s is None:
            raise EpisodeError("reset() has not been called")
        return np.concatenate([s.prediction, s.encoding, [s.pseudotime]])

    def reset(self, cell: Optional[int] = None, perturbation: Optional[PerturbationSpec] = None) -> np.ndarray:
        if cell is None:
            cell = int(self.cells[self.rng.integers(self.cells.size)])
        elif cell not in set(self.cells.tolist()):
            raise DataError(f"cell {cell} is not in split {self.split}")
        if perturbation is None:
            perturbation = sample_perturbation(self.rng, self.n_genes, self.config)
        baseline = self.dataset.matrix[cell, self.genes].copy()
        target = apply_perturbation(baseline, perturbation, self.config, self.rng, self.regulatory)
        encoding = np.zeros(2 * self.n_genes)
        encoding[int(perturbation.kind) * self.n_genes + perturbation.target] = 1.0
        self.state = EnvState(
            cell=int(cell),
            baseline=baseline,
            prediction=baseline.copy(),
            perturbation=perturbation,
            encoding=encoding,
            pseudotime=float(self.dataset.pseudotime[cell]),
            target=target,
        )
        return self.observation()

    def step(self, action: np.ndarray) -> Tuple[np.ndarray, float, bool]:
        s = self.state
        if s is None:
            raise EpisodeError("reset() has not been called")
        if s.done:
            raise EpisodeError("step() called on a finished episode")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.n_genes,):
            raise ValueError(f"action shape {action.shape} != ({self.n_genes},)")
        if not np.all(np.isfinite(action)):
            raise ValueError("action contains non-finite values")
        before = mse(s.prediction, s.target)
        s.prediction = s.prediction + np.clip(action, -self.config.action_scale, self.config.action_scale)
        reward = before - mse(s.prediction, s.target)
        s.steps += 1
        s.done = s.steps >= self.config.episode_length
        s.rewards.append(reward)
        return self.observation(), reward, s.done
