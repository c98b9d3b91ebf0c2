"""Plain-numpy reference implementations used as independent oracles."""

import numpy as np

from hotspot_erc.nn import LN_EPS


def np_attention(q_seq, kv_seq, p, mask=None):
    """Loop-over-heads reference implementation."""
    heads, h = p.head_count, p.width
    dk = h // heads
    q = q_seq @ p.wq.data + p.bq.data
    k = kv_seq @ p.wk.data + p.bk.data
    v = kv_seq @ p.wv.data + p.bv.data
    outs = []
    for i in range(heads):
        sl = slice(i * dk, (i + 1) * dk)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dk)
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        outs.append((s / s.sum(axis=1, keepdims=True)) @ v[:, sl])
    return np.concatenate(outs, axis=1) @ p.wo.data + p.bo.data


def np_layer_norm(x, g, s):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + s


def np_cross_block(tgt, src, p, self_attend=False):
    normed = np_layer_norm(tgt, p.norm1.gain.data, p.norm1.shift.data)
    y = tgt + np_attention(normed, normed if self_attend else src, p.attn)
    z = np_layer_norm(y, p.norm2.gain.data, p.norm2.shift.data)
    hidden = np.maximum(z @ p.ffn.w1.data + p.ffn.b1.data, 0)
    return y + hidden @ p.ffn.w2.data + p.ffn.b2.data


def np_ffn(x, w1, b1, w2, b2):
    return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2


class _View:
    """Attribute access to one slice of a stacked parameter tree."""

    def __init__(self, arrays, head_count=None):
        for name, value in arrays.items():
            setattr(self, name, _Arr(value))
        if head_count is not None:
            self.head_count = head_count
            self.width = arrays["wq"].shape[-1]


class _Arr:
    def __init__(self, data):
        self.data = data


def attention_slice(attn, e):
    names = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
    return _View({n: getattr(attn, n).data[e] for n in names}, attn.head_count)


def np_topk_softmax(logits, k):
    """Sort-based reference: keep the k largest, ties to the lower index."""
    logits = np.asarray(logits, dtype=np.float64)
    order = sorted(range(logits.size), key=lambda i: (-logits[i], i))
    kept = sorted(order[: min(k, logits.size)])
    out = np.zeros(logits.size)
    vals = logits[kept]
    e = np.exp(vals - vals.max())
    out[kept] = e / e.sum()
    return out, tuple(kept)


def np_align_pair(xj, xk, pair, k):
    """Reference for one ordered pair: route, run every expert, mix, restore."""
    ctx = np.repeat(xk.mean(axis=0, keepdims=True), xj.shape[0], axis=0)
    logits = np.concatenate([xj, ctx], axis=1) @ pair.router.weight.data + pair.router.bias.data
    weights = np.stack([np_topk_softmax(row, k)[0] for row in logits])
    bank = pair.experts
    mixed = np.zeros_like(xj)
    for e in range(weights.shape[1]):
        z = xj + np_attention(xj, xk, attention_slice(bank.attn, e))
        f = z + np_ffn(z, bank.ffn.w1.data[e], bank.ffn.b1.data[e], bank.ffn.w2.data[e], bank.ffn.b2.data[e])
        mixed += weights[:, e : e + 1] * f
    return np_cross_block(mixed, xk, pair.restore), weights


def np_load_balance(u):
    u = np.asarray(u, dtype=np.float64)
    return float(sum(x * np.log(x) for x in u if x > 0) + np.log(u.size))


def brute_force_edges(length, modalities, window_past, window_future, cross_modal):
    """All (src node, dst node, (s, src modality, dst modality)) satisfying the edge rules."""
    nodes = [(m, t) for m in modalities for t in range(length)]
    edges = set()
    for (ms, ts) in nodes:
        for (md, td) in nodes:
            if ms == md and ts != td:
                if td - window_past <= ts < td:
                    edges.add(((ms, ts), (md, td), (1, ms, md)))
                elif td < ts <= td + window_future:
                    edges.add(((ms, ts), (md, td), (-1, ms, md)))
            elif ms != md and ts == td and cross_modal:
                edges.add(((ms, ts), (md, td), (0, ms, md)))
    return edges


def dense_rgnn(x, triples, node_index, relation_index, rel_weights, self_weights):
    """Dense relation-indexed adjacency evaluation of the relational GCN."""
    n = x.shape[0]
    adj = np.zeros((len(relation_index), n, n))
    for src, dst, rel in triples:
        adj[relation_index[rel], node_index[dst], node_index[src]] = 1.0
    deg = adj.sum(axis=2, keepdims=True)
    norm = np.divide(adj, deg, out=np.zeros_like(adj), where=deg > 0)
    h = x
    for layer, (wr, w0) in enumerate(zip(rel_weights, self_weights)):
        out = h @ w0
        for r in range(adj.shape[0]):
            out = out + norm[r] @ h @ wr[r]
        h = np.maximum(out, 0.0) if layer < len(self_weights) - 1 else out
    return h


def counting_metrics(pred, true, classes):
    """Accuracy and w-F1 by direct counting with exact rationals (precision/recall route)."""
    from fractions import Fraction

    n = len(true)
    correct = sum(1 for p, t in zip(pred, true) if p == t)
    wf1 = Fraction(0)
    f1s = []
    for c in range(classes):
        tp = sum(1 for p, t in zip(pred, true) if p == c and t == c)
        n_pred = sum(1 for p in pred if p == c)
        n_true = sum(1 for t in true if t == c)
        precision = Fraction(tp, n_pred) if n_pred else Fraction(0)
        recall = Fraction(tp, n_true) if n_true else Fraction(0)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else Fraction(0)
        f1s.append(f1)
        wf1 += Fraction(n_true, n) * f1
    return correct / n, float(wf1), [float(f) for f in f1s]
