import numpy as np
import pytest

from audalign import retrieval as rt
from audalign.teacher import HashTeacher


def brute_force(index, query, k):
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    rows = [(-float(np.sum(v * q)), rid) for rid, v in zip(index.ids, index.vectors)]
    rows.sort()
    return [(rid, -s) for s, rid in rows[:k]]


def test_build_index_single_and_normalized():
    idx = rt.build_index([("a", [3.0, 4.0])])
    assert idx.count == 1
    assert np.allclose(idx.vectors[0], [0.6, 0.8])
    with pytest.raises(ValueError):
        idx.vectors[0, 0] = 1.0


def test_build_index_errors():
    with pytest.raises(ValueError):
        rt.build_index([("a", [1, 0]), ("a", [0, 1])])
    with pytest.raises(ValueError):
        rt.build_index([("a", [0, 0])])
    with pytest.raises(ValueError):
        rt.build_index([])


def test_self_query_rank_one():
    rng = np.random.default_rng(0)
    entries = [(f"r{i}", rng.normal(size=16)) for i in range(50)]
    idx = rt.build_index(entries)
    (top, score), = rt.topk(idx, entries[17][1], 1)
    assert top == "r17"
    assert score == pytest.approx(1.0, abs=1e-12)


def test_topk_full_ranking_and_k_errors():
    idx = rt.build_index([("b", [1, 0]), ("a", [0.6, 0.8]), ("c", [-1, 0])])
    assert [r for r, _ in rt.topk(idx, [1, 0], 3)] == ["b", "a", "c"]
    with pytest.raises(ValueError):
        rt.topk(idx, [1, 0], 4)
    with pytest.raises(ValueError):
        rt.topk(idx, [1, 0, 0], 1)


def test_orthogonal_query_ties_in_id_order():
    idx = rt.build_index([("z", [1, 0, 0]), ("m", [0, 1, 0]), ("a", [1, 1, 0])])
    out = rt.topk(idx, [0, 0, 1], 3)
    assert [r for r, _ in out] == ["a", "m", "z"]
    assert all(s == 0 for _, s in out)


def test_topk_matches_brute_force_with_ties():
    rng = np.random.default_rng(1)
    for trial in range(40):
        n = int(rng.integers(1, 400))
        d = int(rng.integers(2, 12))
        # few distinct integer rows, so exact ties are common
        base = rng.integers(-2, 3, (max(1, n // 4), d)).astype(float)
        base[np.all(base == 0, axis=1), 0] = 1.0
        rows = base[rng.integers(0, len(base), n)]
        ids = [f"id{j:05d}" for j in rng.permutation(n)]
        idx = rt.build_index(zip(ids, rows))
        q = rng.integers(-2, 3, d).astype(float)
        q[0] += 0.5
        k = int(rng.integers(1, min(50, n) + 1))
        assert rt.topk(idx, q, k) == brute_force(idx, q, k)


def test_topk_large_index():
    rng = np.random.default_rng(2)
    idx = rt.build_index((f"r{i}", v) for i, v in enumerate(rng.normal(size=(10_000, 8))))
    q = rng.normal(size=8)
    assert rt.topk(idx, q, 50) == brute_force(idx, q, 50)


# --------------------------------------------------------------- zero-shot

NAMES = ("Healthy", "Pneumonia", "COPD")


def test_zeroshot_k1_report_equal_to_class_name():
    teacher = HashTeacher(dim=256)
    idx = rt.build_index([("a", [1.0, 0.0]), ("b", [0.0, 1.0])])
    texts = {"a": "Pneumonia", "b": "COPD"}
    label, scores = rt.zeroshot_classify([0.9, 0.1], idx, texts, rt.ZeroShotConfig(NAMES, k=1), teacher)
    assert label == "Pneumonia"
    assert scores[1] == pytest.approx(1.0, abs=1e-12)


def test_zeroshot_majority_vote_and_fallback():
    teacher = HashTeacher(dim=256)
    idx = rt.build_index([("a", [1.0, 0.0]), ("b", [0.95, 0.05]), ("c", [0.0, 1.0])])
    texts = {"a": "COPD", "b": "COPD", "c": "Healthy"}
    cfg = rt.ZeroShotConfig(NAMES, k=3, aggregation="majority-vote")
    label, scores = rt.zeroshot_classify([1.0, 0.1], idx, texts, cfg, teacher)
    assert label == "COPD"
    assert scores[2] == pytest.approx(2 / 3, abs=1e-5)
    texts = {"a": "COPD", "b": "Healthy", "c": "Pneumonia"}
    tie, _ = rt.zeroshot_classify([1.0, 0.1], idx, texts, cfg, teacher)
    mean, _ = rt.zeroshot_classify([1.0, 0.1], idx, texts, rt.ZeroShotConfig(NAMES, k=3), teacher)
    assert tie == mean


def test_zeroshot_errors():
    teacher = HashTeacher(dim=64)
    idx = rt.build_index([("a", [1.0, 0.0])])
    with pytest.raises(KeyError):
        rt.zeroshot_classify([1, 0], idx, {}, rt.ZeroShotConfig(NAMES, k=1), teacher)
    with pytest.raises(ValueError):
        rt.zeroshot_classify([1, 0], idx, {"a": "x"}, rt.ZeroShotConfig(("one",), k=1), teacher)


def test_zeroshot_insertion_order_invariant():
    rng = np.random.default_rng(3)
    teacher = HashTeacher(dim=256)
    vocab = ["crackles", "wheezes", "pneumonia", "copd", "normal", "breath", "sounds", "healthy"]
    entries = [(f"r{i}", rng.normal(size=6)) for i in range(30)]
    texts = {rid: " ".join(rng.choice(vocab, 4)) for rid, _ in entries}
    queries = rng.normal(size=(10, 6))
    cfg = rt.ZeroShotConfig(NAMES, k=5)
    a = rt.zeroshot_scores(queries, rt.build_index(entries), texts, cfg, teacher)
    b = rt.zeroshot_scores(queries, rt.build_index(entries[::-1]), texts, cfg, teacher)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


def test_zeroshot_two_class_synthetic_above_chance():
    # audio vectors are noisy copies of their report's class direction
    rng = np.random.default_rng(4)
    teacher = HashTeacher(dim=512)
    names = ("Healthy", "Pneumonia")
    centers = rng.normal(size=(2, 16))
    ids, vecs, texts, labels = [], [], {}, []
    for i in range(200):
        c = i % 2
        ids.append(f"r{i}")
        vecs.append(centers[c] + 0.8 * rng.normal(size=16))
        texts[f"r{i}"] = f"findings consistent with {names[c].lower()} on auscultation"
        labels.append(names[c])
    idx = rt.build_index(zip(ids, vecs))
    queries = [centers[i % 2] + 0.8 * rng.normal(size=16) for i in range(60)]
    truth = [names[i % 2] for i in range(60)]
    from audalign.evaluation import auroc
    _, scores = rt.zeroshot_scores(queries, idx, texts, rt.ZeroShotConfig(names, k=5), teacher)
    assert auroc(scores, np.array(truth), classes=list(names)) > 0.9


def test_bridge_recovers_rotation_shift_scale():
    rng = np.random.default_rng(5)
    text = rng.normal(size=(80, 12))
    q, _ = np.linalg.qr(rng.normal(size=(12, 12)))
    audio = 0.3 * (text @ q.T) + 5.0
    br = rt.fit_bridge(audio, text)
    assert np.allclose(br.audio(audio), br.text(text), atol=1e-10)
    with pytest.raises(ValueError):
        rt.fit_bridge(audio[:, :5], text)


def test_index_save_load(tmp_path):
    rng = np.random.default_rng(6)
    idx = rt.build_index((f"r{i}", rng.normal(size=4)) for i in range(5))
    p = tmp_path / "i.emb"
    rt.save_index(p, idx, {"r0": "text zero"})
    back, texts = rt.load_index(p)
    assert back.ids == idx.ids
    assert np.allclose(back.vectors, idx.vectors, atol=1e-6)
    assert texts == {"r0": "text zero"}
