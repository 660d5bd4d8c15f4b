"""Dataset parsing, preprocessing and benchmark task sequences.

Supported containers are IDX (MNIST family, optionally gzipped) and the
CIFAR binary record format.  Images come out as float arrays scaled to
``[0, 1]``; no other normalization is applied.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DependencyError, DomainError, FormatError, LengthError

DATA_ROOT_ENV = "SPARSECL_DATA_ROOT"

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

CIFAR10_NAMES = ["airplane", "car", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]

CIFAR100_NAMES = (
    "apple aquarium_fish baby bear beaver bed bee beetle bicycle bottle bowl boy bridge bus butterfly camel "
    "can castle caterpillar cattle chair chimpanzee clock cloud cockroach couch crab crocodile cup dinosaur "
    "dolphin elephant flatfish forest fox girl hamster house kangaroo keyboard lamp lawn_mower leopard lion "
    "lizard lobster man maple_tree motorcycle mountain mouse mushroom oak_tree orange orchid otter palm_tree "
    "pear pickup_truck pine_tree plain plate poppy porcupine possum rabbit raccoon ray road rocket rose sea "
    "seal shark shrew skunk skyscraper snail snake spider squirrel streetcar sunflower sweet_pepper table "
    "tank telephone television tiger tractor train trout tulip turtle wardrobe whale willow_tree wolf woman worm"
).split()

FASHION_NAMES = ["t-shirt/top", "trouser", "pullover", "dress", "coat", "sandal", "shirt", "sneaker", "bag", "ankle boot"]
NOTMNIST_NAMES = list("ABCDEFGHIJ")
MNIST_NAMES = [str(d) for d in range(10)]

# -- IDX ---------------------------------------------------------------------------


def _open(path, mode="rb"):
    path = str(path)
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def parse_idx(raw: bytes):
    """Decode an IDX byte string into an array of the declared type and shape."""
    if len(raw) < 4:
        raise LengthError("IDX header truncated")
    zero, dtype_code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or dtype_code not in IDX_DTYPES or ndim == 0:
        raise FormatError(f"bad IDX magic 0x{raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError("IDX dimension header truncated")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    dt = IDX_DTYPES[dtype_code]
    need = int(np.prod(dims)) * dt.itemsize
    payload = raw[header:]
    if len(payload) < need:
        raise LengthError(f"IDX payload has {len(payload)} bytes, header declares {need}")
    if len(payload) > need:
        raise LengthError(f"IDX payload has {len(payload) - need} trailing bytes")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def load_idx(path, scale=True):
    """Read an IDX file; unsigned-byte tensors of rank >= 2 are scaled to ``[0, 1]``."""
    with _open(path) as f:
        arr = parse_idx(f.read())
    if scale and arr.ndim >= 2 and arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.ndim == 1:
        return arr.astype(np.int64)
    return arr


def load_idx_pair(images_path, labels_path):
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise LengthError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


def write_idx(path, array):
    arr = np.asarray(array)
    codes = {v.newbyteorder("="): k for k, v in IDX_DTYPES.items()}
    code = codes.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {arr.dtype} has no IDX code")
    body = struct.pack(">BBBB", 0, 0, code, arr.ndim) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    body += arr.astype(IDX_DTYPES[code]).tobytes()
    with _open(path, "wb") as f:
        f.write(body)


# -- CIFAR binary --------------------------------------------------------------------

CIFAR_PIXELS = 3 * 32 * 32


def load_cifar_binary(path, label_bytes=1, label_index=-1):
    """Parse CIFAR binary records: ``label_bytes`` label bytes then 3072 R/G/B plane bytes.

    CIFAR-100 files carry (coarse, fine) labels; ``label_index=-1`` picks the fine one.
    """
    raw = Path(path).read_bytes()
    rec = label_bytes + CIFAR_PIXELS
    if len(raw) % rec:
        raise LengthError(f"{path}: {len(raw)} bytes is not a multiple of the {rec}-byte record")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = data[:, :label_bytes][:, label_index].astype(np.int64)
    images = data[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def write_cifar_binary(path, images_u8, labels):
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(images_u8), -1)
    labels = np.asarray(labels, dtype=np.uint8).reshape(len(images_u8), -1)
    Path(path).write_bytes(np.hstack([labels, images_u8]).tobytes())


# -- preprocessing ---------------------------------------------------------------------


def preprocess(images, size=32, channels=3):
    """Bilinear resize to ``size x size`` and replicate gray images to ``channels``.

    Accepts ``(N, H, W)`` or ``(N, C, H, W)``; returns ``(N, channels, size, size)``
    in ``[0, 1]``.
    """
    from skimage.transform import resize

    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise DomainError(f"expected (N, H, W) or (N, C, H, W) images, got shape {x.shape}")
    n, c, h, w = x.shape
    if (h, w) != (size, size):
        x = resize(x, (n, c, size, size), order=1, mode="edge", anti_aliasing=False, preserve_range=True)
    if c == 1 and channels > 1:
        x = np.repeat(x, channels, axis=1)
    elif c != channels:
        raise DomainError(f"cannot map {c} channels to {channels}")
    return np.clip(x, 0.0, 1.0)


# -- benchmarks ------------------------------------------------------------------------


@dataclass
class Task:
    index: int
    classes: list
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def class_data(self):
        return {c: self.x_train[self.y_train == c] for c in self.classes}


@dataclass
class BenchmarkSpec:
    """Ordered tasks of global class ids; ``sources[c]`` is ``(dataset, label)``."""

    name: str
    tasks: list
    class_names: dict
    sources: dict
    reuse_start_task: int
    input_shape: tuple
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for t in self.tasks:
            if seen & set(t):
                raise DomainError(f"{self.name}: class appears in two tasks")
            seen |= set(t)
        if len({len(t) for t in self.tasks}) > 1:
            raise DomainError(f"{self.name}: tasks differ in class count")

    @property
    def classes_per_task(self):
        return len(self.tasks[0])

    @property
    def n_classes(self):
        return sum(len(t) for t in self.tasks)

    def to_dict(self):
        return {
            "name": self.name,
            "tasks": self.tasks,
            "class_names": {str(k): v for k, v in self.class_names.items()},
            "reuse_start_task": self.reuse_start_task,
            "input_shape": list(self.input_shape),
            "notes": self.notes,
        }


@dataclass
class TaskSequence:
    spec: BenchmarkSpec
    tasks: list

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]


def _table(name, dataset_tasks, names_of, reuse_start, input_shape, notes=None):
    """Build a BenchmarkSpec from ``[(dataset, [class name, ...]), ...]`` rows."""
    tasks, class_names, sources = [], {}, {}
    gid = 0
    for dataset, names in dataset_tasks:
        ids = []
        for n in names:
            label = names_of[dataset].index(n)
            class_names[gid] = n if dataset in ("cifar10", "cifar100") else f"{dataset}:{n}"
            sources[gid] = (dataset, label)
            ids.append(gid)
            gid += 1
        tasks.append(ids)
    return BenchmarkSpec(name, tasks, class_names, sources, reuse_start, input_shape, notes or {})


NAMES_OF = {
    "cifar10": CIFAR10_NAMES,
    "cifar100": CIFAR100_NAMES,
    "mnist": MNIST_NAMES,
    "fashion": FASHION_NAMES,
    "notmnist": NOTMNIST_NAMES,
}

IMAGE32 = (3, 32, 32)

# visually similar digits go to different tasks: 4/9, 3/5/8, 7/1, 0/6, 2/...
SIM_MNIST_ORDER = [["4", "3"], ["7", "0"], ["9", "5"], ["1", "6"], ["2", "8"]]

BENCHMARKS = {
    "split-cifar10": lambda: _table(
        "split-cifar10",
        [("cifar10", p) for p in (["airplane", "car"], ["bird", "cat"], ["deer", "dog"], ["frog", "horse"], ["ship", "truck"])],
        NAMES_OF, 3, IMAGE32,
    ),
    "sim-cifar10": lambda: _table(
        "sim-cifar10",
        [("cifar10", p) for p in (["car", "cat"], ["horse", "truck"], ["dog", "deer"], ["airplane", "bird"], ["frog", "ship"])],
        NAMES_OF, 3, IMAGE32,
    ),
    "sim-cifar100": lambda: _table(
        "sim-cifar100",
        [
            ("cifar100", p)
            for p in (
                ["apple", "girl"], ["mouse", "bicycle"], ["bee", "lion"], ["bottle", "couch"],
                ["orange", "boy"], ["rabbit", "motorcycle"], ["butterfly", "tiger"], ["can", "chair"],
            )
        ],
        NAMES_OF, 5, IMAGE32,
    ),
    "mix": lambda: _table(
        "mix",
        [
            ("cifar10", ["airplane", "car", "bird", "cat", "deer"]),
            ("mnist", ["0", "1", "2", "3", "4"]),
            ("notmnist", ["A", "B", "C", "D", "E"]),
            ("fashion", ["t-shirt/top", "trouser", "pullover", "dress", "coat"]),
            ("cifar10", ["dog", "frog", "horse", "ship", "truck"]),
            ("mnist", ["5", "6", "7", "8", "9"]),
            ("notmnist", ["F", "G", "H", "I", "J"]),
            ("fashion", ["sandal", "shirt", "sneaker", "bag", "ankle boot"]),
        ],
        NAMES_OF, 5, IMAGE32, {"notmnist_split": "seeded 90/10 when no test files exist"},
    ),
    "split-mnist": lambda: _table(
        "split-mnist", [("mnist", [str(2 * i), str(2 * i + 1)]) for i in range(5)], NAMES_OF, 3, (784,),
        {"scale": "desk-scale analog, flattened 28x28 inputs"},
    ),
    "sim-mnist": lambda: _table(
        "sim-mnist", [("mnist", p) for p in SIM_MNIST_ORDER], NAMES_OF, 3, (784,),
        {"scale": "desk-scale analog; similar digits split across tasks", "order": SIM_MNIST_ORDER},
    ),
}

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def data_root(dataset, roots=None):
    if roots and dataset in roots:
        return Path(roots[dataset])
    base = os.environ.get(DATA_ROOT_ENV, "data")
    return Path(base) / dataset


def _find(root, stem):
    for cand in (root / stem, root / (stem + ".gz")):
        if cand.exists():
            return cand
    return None


def load_idx_dataset(root, split_seed=0, test_fraction=0.1):
    """Train/test arrays from an MNIST-style directory.

    A directory holding only ``train-*`` files is split with a seeded
    ``test_fraction`` hold-out.
    """
    root = Path(root)
    tr = [_find(root, s) for s in IDX_FILES["train"]]
    te = [_find(root, s) for s in IDX_FILES["test"]]
    if None in tr:
        raise DependencyError([root / s for s, p in zip(IDX_FILES["train"], tr) if p is None])
    x, y = load_idx_pair(*tr)
    if None not in te:
        xt, yt = load_idx_pair(*te)
        return x, y, xt, yt
    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(len(x))
    n_test = int(round(test_fraction * len(x)))
    te_idx, tr_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return x[tr_idx], y[tr_idx], x[te_idx], y[te_idx]


def load_cifar10(root):
    root = Path(root)
    train = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
    test = root / "test_batch.bin"
    missing = [p for p in train + [test] if not p.exists()]
    if missing:
        raise DependencyError(missing)
    parts = [load_cifar_binary(p) for p in train]
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    xt, yt = load_cifar_binary(test)
    return x, y, xt, yt


def load_cifar100(root):
    root = Path(root)
    paths = [root / "train.bin", root / "test.bin"]
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise DependencyError(missing)
    x, y = load_cifar_binary(paths[0], label_bytes=2)
    xt, yt = load_cifar_binary(paths[1], label_bytes=2)
    return x, y, xt, yt


def _load_source(dataset, roots):
    root = data_root(dataset, roots)
    if dataset == "cifar10":
        return load_cifar10(root)
    if dataset == "cifar100":
        return load_cifar100(root)
    return load_idx_dataset(root)


def _required_paths(spec, roots):
    missing = []
    for dataset in sorted({s[0] for s in spec.sources.values()}):
        try:
            root = data_root(dataset, roots)
            if dataset == "cifar10":
                need = [root / f"data_batch_{i}.bin" for i in range(1, 6)] + [root / "test_batch.bin"]
                missing += [p for p in need if not p.exists()]
            elif dataset == "cifar100":
                missing += [p for p in (root / "train.bin", root / "test.bin") if not p.exists()]
            else:
                missing += [root / s for s in IDX_FILES["train"] if _find(root, s) is None]
        except OSError as e:
            missing.append(str(e))
    return missing


def build_benchmark(name, roots=None, max_per_class=None, seed=0, **synthetic):
    """Return ``(BenchmarkSpec, TaskSequence)`` for a named benchmark.

    ``max_per_class`` caps training samples per class (seeded) for desk-scale runs.
    ``synthetic`` keyword arguments go to :func:`synth_gaussian_tasks`.
    """
    if name == "synthetic":
        seq = synth_gaussian_tasks(seed=seed, **synthetic)
        return seq.spec, seq
    if name not in BENCHMARKS:
        raise DomainError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS) + ['synthetic']}")
    spec = BENCHMARKS[name]()
    missing = _required_paths(spec, roots)
    if missing:
        raise DependencyError(missing)
    cache = {}
    flat = spec.input_shape == (784,)
    rng = np.random.default_rng(seed)
    tasks = []
    for t, ids in enumerate(spec.tasks):
        parts = {"xtr": [], "ytr": [], "xte": [], "yte": []}
        for gid in ids:
            dataset, label = spec.sources[gid]
            if dataset not in cache:
                cache[dataset] = _load_source(dataset, roots)
            x, y, xt, yt = cache[dataset]
            tr = np.flatnonzero(y == label)
            if max_per_class is not None and len(tr) > max_per_class:
                tr = np.sort(rng.choice(tr, max_per_class, replace=False))
            te = np.flatnonzero(yt == label)
            parts["xtr"].append(x[tr])
            parts["xte"].append(xt[te])
            parts["ytr"].append(np.full(len(tr), gid))
            parts["yte"].append(np.full(len(te), gid))
        xtr, xte = np.concatenate(parts["xtr"]), np.concatenate(parts["xte"])
        if flat:
            width = int(np.prod(xtr.shape[1:]))
            xtr, xte = xtr.reshape(len(xtr), width), xte.reshape(len(xte), width)
        else:
            xtr, xte = preprocess(xtr), preprocess(xte)
        tasks.append(Task(t, list(ids), xtr, np.concatenate(parts["ytr"]), xte, np.concatenate(parts["yte"])))
    return spec, TaskSequence(spec, tasks)


def synth_gaussian_tasks(
    num_tasks=5,
    classes_per_task=2,
    dim=20,
    separation=6.0,
    samples=100,
    seed=0,
    similarity=0.0,
    period=1,
    test_samples=None,
    shift=None,
):
    """Isotropic unit-variance Gaussian classes with orthogonal centers.

    With ``similarity`` s, class k of task t >= ``period`` is centered at
    ``(1 - s) * own + s * (center of class k of task t - period + shift)``;
    s = 1 copies the earlier cluster moved by the fixed ``shift`` vector
    (default length ``separation / 2`` along the last axis).
    """
    if not separation > 0:
        raise DomainError("separation must be > 0")
    if not 0.0 <= similarity <= 1.0:
        raise DomainError("similarity must lie in [0, 1]")
    n_classes = num_tasks * classes_per_task
    if dim < n_classes + 1:
        raise DomainError(f"dim must be >= {n_classes + 1} for orthogonal centers plus a shift axis")
    rng = np.random.default_rng(seed)
    if shift is None:
        shift = np.zeros(dim)
        shift[-1] = separation / 2
    shift = np.asarray(shift, dtype=np.float64)
    own = separation * np.eye(dim)[:n_classes]
    centers = own.copy()
    for t in range(period, num_tasks):
        for k in range(classes_per_task):
            j, prev = t * classes_per_task + k, (t - period) * classes_per_task + k
            centers[j] = (1 - similarity) * own[j] + similarity * (centers[prev] + shift)
    test_samples = samples if test_samples is None else test_samples
    tasks = []
    for t in range(num_tasks):
        ids = list(range(t * classes_per_task, (t + 1) * classes_per_task))
        xtr = np.vstack([centers[c] + rng.normal(size=(samples, dim)) for c in ids])
        xte = np.vstack([centers[c] + rng.normal(size=(test_samples, dim)) for c in ids])
        ytr = np.repeat(ids, samples)
        yte = np.repeat(ids, test_samples)
        tasks.append(Task(t, ids, xtr, ytr, xte, yte))
    spec = BenchmarkSpec(
        "synthetic",
        [t.classes for t in tasks],
        {c: f"g{c}" for c in range(n_classes)},
        {c: ("synthetic", c) for c in range(n_classes)},
        reuse_start_task=min(2, num_tasks),
        input_shape=(dim,),
        notes={"separation": separation, "similarity": similarity, "period": period, "seed": seed},
    )
    return TaskSequence(spec, tasks)


def export_mnist_subset(out_dir, test_per_class=100, seed=0):
    """Write the 5,000-digit MNIST sample bundled with ``mlxtend`` as IDX files.

    A seeded, class-stratified hold-out of ``test_per_class`` digits per class
    goes to the ``t10k`` files.  Returns the output directory.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = x.reshape(-1, 28, 28).astype(np.uint8)
    y = y.astype(np.uint8)
    rng = np.random.default_rng(seed)
    test = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        test[rng.choice(idx, test_per_class, replace=False)] = True
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", x[~test])
    write_idx(out / "train-labels-idx1-ubyte.gz", y[~test])
    write_idx(out / "t10k-images-idx3-ubyte.gz", x[test])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", y[test])
    return out
