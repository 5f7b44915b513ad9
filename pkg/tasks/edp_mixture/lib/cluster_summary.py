"""Turn sampled partitions into one clustering: co-clustering counts, sup-norm distances, Ward, cut at median K."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from tasks.edp_mixture.lib.errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass
class WardLinkage:
    """Merge history: ``pairs[s]`` are the original-index representatives joined at step s."""
    pairs: np.ndarray
    heights: np.ndarray
    sizes: np.ndarray
    n: int


def coclustering_matrix(partitions):
    """M[i, j] = number of snapshots in which subjects i and j share a label."""
    partitions = [np.asarray(p).reshape(-1) for p in partitions]
    if not partitions:
        raise DataError('EMPTY_TRACE', 'no partition snapshots to summarise')
    n = partitions[0].size
    counts = np.zeros((n, n), dtype=np.int64)
    if n == 0:
        return counts
    for snapshot in partitions:
        if snapshot.size != n:
            raise DataError('LENGTH_MISMATCH', 'partition snapshot has {} subjects, expected {}'.format(
                snapshot.size, n))
        _, labels = np.unique(snapshot, return_inverse=True)
        one_hot = np.zeros((n, labels.max() + 1), dtype=np.int64)
        one_hot[np.arange(n), labels] = 1
        counts += one_hot @ one_hot.T
    return counts


def pair_labels(s_y, s_x):
    """Encode (θ, ψ) pairs as single labels so the pipeline can summarise subclusters."""
    pairs = np.column_stack([np.asarray(s_y), np.asarray(s_x)])
    _, labels = np.unique(pairs, axis=0, return_inverse=True)
    return labels.reshape(-1)


def supremum_distance(counts):
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise DataError('LENGTH_MISMATCH', 'co-clustering matrix must be square')
    if counts.shape[0] < 2:
        return np.zeros(counts.shape)
    return squareform(pdist(counts, metric='chebyshev'))


def _nearest_above(d2, active, k):
    """Closest active column past k in row k; the smallest index wins ties."""
    cols = np.flatnonzero(active[k + 1:]) + k + 1
    if cols.size == 0:
        return -1, np.inf
    best = int(np.argmin(d2[k, cols]))
    return int(cols[best]), d2[k, cols[best]]


def ward_linkage(distances):
    """ward.D2 agglomeration: Lance–Williams updates on squared input distances, heights reported unsquared.

    Ties go to the pair whose current representatives are lexicographically
    smallest; a merged cluster keeps the smaller representative index.

    Each row caches its nearest active neighbour to the right; a step
    rescans only the rows whose cached neighbour took part in the merge.
    """
    d2 = np.asarray(distances, dtype=float) ** 2
    n = d2.shape[0]
    active = np.ones(n, dtype=bool)
    size = np.ones(n)
    pairs = np.zeros((max(n - 1, 0), 2), dtype=np.int64)
    heights = np.zeros(max(n - 1, 0))
    sizes = np.zeros(max(n - 1, 0), dtype=np.int64)
    nn = np.full(n, -1, dtype=np.int64)
    nn_d2 = np.full(n, np.inf)
    for k in range(n):
        nn[k], nn_d2[k] = _nearest_above(d2, active, k)

    for step in range(n - 1):
        i = int(np.argmin(nn_d2))
        j = int(nn[i])
        cost = d2[i, j]

        others = active.copy()
        others[[i, j]] = False
        total = size[i] + size[j] + size[others]
        updated = ((size[i] + size[others]) * d2[i, others] + (size[j] + size[others]) * d2[j, others]
                   - size[others] * cost) / total
        d2[i, others] = updated
        d2[others, i] = updated

        pairs[step] = (i, j)
        heights[step] = np.sqrt(max(cost, 0.0))
        size[i] += size[j]
        sizes[step] = int(size[i])
        active[j] = False
        nn_d2[j] = np.inf

        stale = active & ((nn == i) | (nn == j))
        stale[i] = True
        for k in np.flatnonzero(stale):
            nn[k], nn_d2[k] = _nearest_above(d2, active, k)
        left = np.flatnonzero(active[:i] & ~stale[:i])
        closer = (d2[left, i] < nn_d2[left]) | ((d2[left, i] == nn_d2[left]) & (i < nn[left]))
        nn[left[closer]] = i
        nn_d2[left[closer]] = d2[left[closer], i]
    return WardLinkage(pairs=pairs, heights=heights, sizes=sizes, n=n)


def cut_linkage(linkage, n_clusters):
    """Replay the first n - K merges and label groups 1..K by first appearance in subject order."""
    n = linkage.n
    parent = np.arange(n)

    def root(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in linkage.pairs[:n - n_clusters]:
        parent[root(j)] = root(i)
    roots = [root(i) for i in range(n)]
    mapping = {}
    for r in roots:
        mapping.setdefault(r, len(mapping) + 1)
    return np.array([mapping[r] for r in roots], dtype=np.int64)


def ward_cluster(distances, n_clusters):
    distances = np.asarray(distances, dtype=float)
    n = distances.shape[0]
    if not 1 <= n_clusters <= n:
        raise ConfigError('INVALID_K', 'cannot cut {} subjects into {} clusters'.format(n, n_clusters))
    return cut_linkage(ward_linkage(distances), n_clusters)


def posterior_num_clusters(traces):
    """Lower median of the retained θ-cluster counts."""
    counts = sorted(int(getattr(t, 'n_theta_clusters', t)) for t in traces)
    if not counts:
        raise DataError('EMPTY_TRACE', 'no retained iterations to take the median over')
    return counts[(len(counts) - 1) // 2]


def summarize(partitions, traces, level='theta'):
    """Full pipeline over retained snapshots; ``level='psi'`` clusters on (θ, ψ) pairs instead of θ alone.

    ``partitions`` holds n×2 (s_y, s_x) arrays or plain s_y vectors.
    """
    snapshots = []
    for snapshot in partitions:
        snapshot = np.asarray(snapshot)
        if level == 'psi' and snapshot.ndim == 2:
            snapshots.append(pair_labels(snapshot[:, 0], snapshot[:, 1]))
        else:
            snapshots.append(snapshot[:, 0] if snapshot.ndim == 2 else snapshot)

    if level == 'psi':
        counts = sorted(int(getattr(t, 'n_psi_clusters_total', t)) for t in traces)
        if not counts:
            raise DataError('EMPTY_TRACE', 'no retained iterations to take the median over')
        n_clusters = counts[(len(counts) - 1) // 2]
    else:
        n_clusters = posterior_num_clusters(traces)

    distances = supremum_distance(coclustering_matrix(snapshots))
    n_clusters = min(n_clusters, distances.shape[0])
    labels = ward_cluster(distances, n_clusters)
    log.info('summarised %s snapshots of %s subjects into %s clusters', len(snapshots), distances.shape[0],
             n_clusters)
    return labels
