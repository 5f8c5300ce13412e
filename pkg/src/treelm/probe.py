"""Linear diagnostic probe: predict each token's grandparent constituent
label from frozen LM hidden states ([h_t; h_{t+1}], top layer)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import atomic_write

ROOT_PAD = "<root>"
SPLITS = ("train", "valid", "test")


def grandparent_labels(tree):
    """Per-leaf label of the ancestor two levels up; ROOT_PAD when the tree
    is too shallow.  With a preterminal layer this is the constituent above
    the POS tag."""
    labels = []

    def walk(node, parent_label, grandparent_label):
        if node.is_leaf:
            labels.append(grandparent_label if grandparent_label else ROOT_PAD)
            return
        for child in node.children:
            walk(child, node.label, parent_label)

    walk(tree, None, None)
    return labels


def extract_features(model, tokens):
    """(len, 2H) array: concatenated top-layer states at the current and next
    input positions; the last token pairs with the post-EOS state."""
    states = model.hidden_states(list(tokens))  # len+1 entries
    return np.array([np.concatenate([states[t], states[t + 1]])
                     for t in range(len(tokens))])


@dataclass
class ProbeDataset:
    features: dict      # split -> (N, D) array
    labels: dict        # split -> (N,) int array
    label_names: list

    def n_classes(self):
        return len(self.label_names)


def build_dataset(model, trees, split_sizes=(30_000, 3_000, 3_000)):
    """Token-level dataset from a treebank: features from the frozen LM,
    labels from the trees, split by cumulative token count."""
    label_names = sorted({lab for tree in trees
                          for lab in grandparent_labels(tree)})
    label_index = {lab: i for i, lab in enumerate(label_names)}
    features = {s: [] for s in SPLITS}
    labels = {s: [] for s in SPLITS}
    boundaries = np.cumsum(split_sizes)
    total = 0
    for tree in trees:
        tokens = tree.leaves()
        split_idx = int(np.searchsorted(boundaries, total, side="right"))
        if split_idx >= len(SPLITS):
            break
        split = SPLITS[split_idx]
        features[split].append(extract_features(model, tokens))
        labels[split].extend(label_index[lab] for lab in grandparent_labels(tree))
        total += len(tokens)
    out_f, out_l = {}, {}
    for s in SPLITS:
        if not features[s]:
            raise ValueError(f"split {s!r} is empty; not enough trees")
        out_f[s] = np.concatenate(features[s])
        out_l[s] = np.array(labels[s], dtype=np.int64)
    return ProbeDataset(out_f, out_l, label_names)


@dataclass
class ProbeWeights:
    w: np.ndarray  # (C, D)
    b: np.ndarray  # (C,)


def _log_softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def probe_accuracy(weights, features, labels):
    pred = (features @ weights.w.T + weights.b).argmax(axis=1)
    return float((pred == labels).mean())


def train_probe(dataset, l2=1e-4, lr=0.5, max_iters=5000, tol=1e-7):
    """Multinomial logistic regression by full-batch gradient descent.

    Runs until the training loss delta drops below ``tol`` (or max_iters),
    halving the step size whenever the loss increases; the best-validation
    snapshot is returned.
    """
    x, y = dataset.features["train"], dataset.labels["train"]
    n, d = x.shape
    c = dataset.n_classes()
    if c < 2:
        raise ValueError("degenerate single-class dataset")
    if len(np.unique(y)) < 2:
        raise ValueError("degenerate single-class training split")
    w = np.zeros((c, d))
    b = np.zeros(c)
    onehot = np.eye(c)[y]

    def loss_and_grad(w, b):
        logp = _log_softmax_rows(x @ w.T + b)
        loss = -logp[np.arange(n), y].mean() + l2 * (w * w).sum()
        delta = (np.exp(logp) - onehot) / n
        return loss, delta.T @ x + 2 * l2 * w, delta.sum(axis=0)

    best = ProbeWeights(w.copy(), b.copy())
    best_valid = probe_accuracy(best, dataset.features["valid"],
                                dataset.labels["valid"])
    prev_loss, _, _ = loss_and_grad(w, b)
    for it in range(max_iters):
        loss, gw, gb = loss_and_grad(w, b)
        w = w - lr * gw
        b = b - lr * gb
        new_loss, _, _ = loss_and_grad(w, b)
        if new_loss > loss:
            w = w + lr * gw
            b = b + lr * gb
            lr *= 0.5
            continue
        if it % 10 == 0 or abs(prev_loss - new_loss) < tol:
            acc = probe_accuracy(ProbeWeights(w, b),
                                 dataset.features["valid"],
                                 dataset.labels["valid"])
            if acc > best_valid:
                best_valid = acc
                best = ProbeWeights(w.copy(), b.copy())
        if abs(prev_loss - new_loss) < tol:
            break
        prev_loss = new_loss
    return best


def shuffled_labels(dataset, seed):
    """Selectivity control: same features, permuted labels per split."""
    rng = np.random.default_rng(seed)
    labels = {s: rng.permutation(dataset.labels[s]) for s in SPLITS}
    return ProbeDataset(dataset.features, labels, dataset.label_names)


def majority_share(labels):
    counts = np.bincount(labels)
    return float(counts.max() / counts.sum())


def write_dataset_tsv(path, dataset):
    def writer(fh):
        for split in SPLITS:
            feats, labs = dataset.features[split], dataset.labels[split]
            for row, lab in zip(feats, labs):
                values = "\t".join(f"{v:.8g}" for v in row)
                fh.write(f"{split}\t{dataset.label_names[lab]}\t"
                         f"{values}\n".encode())

    atomic_write(path, writer)
