import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedgcdr.dataset import (
    DataError,
    InteractionSet,
    RatingRecord,
    SynthConfig,
    UserRegistry,
    eval_negatives,
    filter_min_interactions,
    leave_one_out_split,
    load_domain_ratings,
    read_split_csv,
    sample_eval_negatives,
    sample_train_negatives,
    synth_generate,
    to_implicit,
    write_split_csv,
)

HEADER = "user_id,item_id,rating,timestamp\n"


def write(tmp_path, body, name="d.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body, encoding="utf-8")
    return p


# ---------------------------------------------------------------- loading

def test_load_keeps_file_order(tmp_path):
    p = write(tmp_path, "b,x,5,3\na,y,4.5,1\nb,z,1,2\n")
    recs = load_domain_ratings(p)
    assert [(r.user_id, r.item_id, r.timestamp) for r in recs] == [("b", "x", 3), ("a", "y", 1), ("b", "z", 2)]


def test_header_only_is_empty(tmp_path):
    assert load_domain_ratings(write(tmp_path, "")) == []


def test_strict_mode_names_bad_line(tmp_path):
    p = write(tmp_path, "a,x,abc,1\n")
    with pytest.raises(DataError, match="line 2"):
        load_domain_ratings(p)


def test_lenient_mode_skips_bad_rows(tmp_path):
    p = write(tmp_path, "a,x,abc,1\na,y,3,2\na,z,4,-1\n")
    recs = load_domain_ratings(p, strict=False)
    assert [r.item_id for r in recs] == ["y"]


def test_strict_listing_capped_at_ten(tmp_path):
    p = write(tmp_path, "".join(f"a,i{j},bad,1\n" for j in range(15)))
    with pytest.raises(DataError) as err:
        load_domain_ratings(p)
    msg = str(err.value)
    assert "15 malformed" in msg and "line 11" in msg and "line 12" not in msg


def test_missing_file_and_bad_header(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        load_domain_ratings(tmp_path / "nope.csv")
    p = tmp_path / "h.csv"
    p.write_text("u,i,r,t\n", encoding="utf-8")
    with pytest.raises(DataError, match="header"):
        load_domain_ratings(p)


def test_min_interaction_filter():
    recs = [RatingRecord("a", "x", 5, 1), RatingRecord("a", "y", 5, 2), RatingRecord("b", "x", 5, 3)]
    assert [r.user_id for r in filter_min_interactions(recs, 2)] == ["a", "a"]
    assert filter_min_interactions(recs, 1) == recs


# ----------------------------------------------------------- implicit data

def test_singleton_to_implicit():
    reg = UserRegistry()
    iset = to_implicit([RatingRecord("u", "i", 5.0, 4)], reg, 0)
    assert iset.triples() == {(0, 0, 4)}


def test_duplicates_keep_latest_timestamp():
    recs = [RatingRecord("u", "i", 2.0, 1), RatingRecord("u", "i", 4.0, 9), RatingRecord("u", "i", 1.0, 5)]
    iset = to_implicit(recs, UserRegistry(), 0)
    # brute-force oracle: max timestamp per pair
    assert iset.triples() == {(0, 0, max(r.timestamp for r in recs))}


def test_full_cross():
    recs = [RatingRecord(u, i, 3.0, 0) for u in "ab" for i in "xy"]
    iset = to_implicit(recs, UserRegistry(), 0)
    assert (len(iset), iset.n_users, iset.n_items) == (4, 2, 2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 5), st.integers(0, 20)), max_size=40))
def test_to_implicit_matches_dedup_oracle(rows):
    recs = [RatingRecord(f"u{u}", f"i{i}", 3.0, t) for u, i, t in rows]
    reg = UserRegistry()
    iset = to_implicit(recs, reg, 0)
    oracle: dict[tuple[str, str], int] = {}
    for r in recs:
        oracle[(r.user_id, r.item_id)] = max(oracle.get((r.user_id, r.item_id), -1), r.timestamp)
    inv_items = {j: iid for j, iid in enumerate(iset.item_ids)}
    inv_users = {reg.local(0, g): uid for uid, g in reg.global_ids.items()}
    got = {(inv_users[u], inv_items[i]): t for u, i, t in iset.triples()}
    assert got == oracle


def test_registry_overlap_and_json_roundtrip():
    reg = UserRegistry()
    to_implicit([RatingRecord("a", "x", 1, 0), RatingRecord("b", "x", 1, 0)], reg, 0)
    to_implicit([RatingRecord("b", "y", 1, 0), RatingRecord("c", "y", 1, 0)], reg, 1)
    assert reg.n_global == 3
    assert reg.local(1, reg.global_ids["a"]) is None
    assert reg.local(1, reg.global_ids["b"]) == 0
    back = UserRegistry.from_json(reg.to_json())
    assert back.global_ids == reg.global_ids and back.per_domain == reg.per_domain
    assert np.array_equal(back.members(1), reg.members(1))


# ------------------------------------------------------------------ split

def _loo_oracle(triples):
    by_user: dict[int, list[tuple[int, int]]] = {}
    for u, i, t in triples:
        by_user.setdefault(u, []).append((t, i))
    test = {}
    for u, rows in by_user.items():
        if len(rows) >= 2:
            test[u] = max(rows)[1]  # latest timestamp, then larger item
    return test


def test_split_takes_latest():
    iset = InteractionSet.from_triples(0, [(0, 1, 3), (0, 2, 7), (0, 3, 9)], 1, 4)
    sp = leave_one_out_split(iset)
    assert sp.test_map() == {0: 3}
    assert sp.train.triples() == {(0, 1, 3), (0, 2, 7)}


def test_single_interaction_user_stays_in_train():
    iset = InteractionSet.from_triples(0, [(0, 1, 3)], 1, 4)
    sp = leave_one_out_split(iset)
    assert sp.test_map() == {} and len(sp.train) == 1


def test_timestamp_tie_goes_to_larger_item():
    iset = InteractionSet.from_triples(0, [(0, 2, 5), (0, 7, 5)], 1, 8)
    assert leave_one_out_split(iset).test_map() == {0: 7}


@settings(max_examples=80, deadline=None)
@given(st.sets(st.tuples(st.integers(0, 6), st.integers(0, 9)), max_size=50), st.integers(0, 10**6))
def test_split_properties(pairs, seed):
    rng = np.random.default_rng(seed)
    triples = [(u, i, int(rng.integers(0, 4))) for u, i in sorted(pairs)]
    iset = InteractionSet.from_triples(0, triples, 7, 10)
    sp = leave_one_out_split(iset)
    assert sp.test_map() == _loo_oracle(triples)
    # re-merging reproduces the original multiset
    merged = sp.train.triples() | set(zip(sp.test_users.tolist(), sp.test_items.tolist(), sp.test_timestamps.tolist()))
    assert merged == set(triples) and len(sp.train) + len(sp.test_users) == len(triples)
    for u, i in sp.test_map().items():
        assert i not in sp.train.user_items(u)


def test_split_csv_roundtrip(tmp_path):
    recs = [RatingRecord(f"u{u}", f"i{i}", 5, (u * 7 + i) % 5) for u in range(6) for i in range(u % 3, 8, 2)]
    reg = UserRegistry()
    sp = leave_one_out_split(to_implicit(recs, reg, 2))
    path = tmp_path / "s.csv"
    write_split_csv(sp, reg, path)
    back = read_split_csv(path, 2, reg, sp.train.item_ids)
    assert back.train.triples() == sp.train.triples()
    assert np.array_equal(back.test_users, sp.test_users) and np.array_equal(back.test_items, sp.test_items)


# ---------------------------------------------------------------- negatives

def test_eval_negatives_forced_pool():
    iset = InteractionSet.from_triples(0, [(0, 0, 1)], 1, 100)
    negs = sample_eval_negatives(iset, 0, 99, np.random.default_rng(0))
    assert sorted(negs.tolist()) == list(range(1, 100))


def test_eval_negatives_pool_too_small():
    iset = InteractionSet.from_triples(0, [(0, i, 1) for i in range(50)], 1, 100)
    with pytest.raises(DataError, match="user 0"):
        sample_eval_negatives(iset, 0, 99, np.random.default_rng(0))


def test_eval_negatives_deterministic_and_disjoint():
    sd = synth_generate(SynthConfig(n_domains=1, signals=("shared-latent",), n_users=40, n_items=200, density=0.05, seed=3))
    sp = leave_one_out_split(sd.domains[0])
    a, b = eval_negatives(sp, 99, 42), eval_negatives(sp, 99, 42)
    assert all(np.array_equal(a[u], b[u]) for u in a)
    c = eval_negatives(sp, 99, 43)
    assert any(not np.array_equal(a[u], c[u]) for u in a)
    test = sp.test_map()
    for u, negs in a.items():
        assert len(set(negs.tolist())) == 99
        assert test[u] not in negs and not set(negs.tolist()) & set(sp.train.user_items(u).tolist())


def test_train_negatives_counts_and_replacement():
    iset = InteractionSet.from_triples(0, [(0, 3, 1)], 1, 10)
    s = sample_train_negatives(iset, 0, 4, np.random.default_rng(0))
    assert len(s.items) == 5 and s.labels.sum() == 1 and not s.with_replacement
    assert 3 not in s.items[1:]
    full = InteractionSet.from_triples(0, [(0, i, 1) for i in range(4)], 1, 4)
    assert sample_train_negatives(full, 0, 2, np.random.default_rng(0)).with_replacement
    again = sample_train_negatives(iset, 0, 4, np.random.default_rng(0))
    assert np.array_equal(s.items, again.items)


# -------------------------------------------------------------- synthesis

def test_synth_full_overlap_two_domains():
    sd = synth_generate(SynthConfig(n_domains=2, signals=("shared-latent", "shared-latent"), n_users=50, n_items=100, density=0.05))
    assert np.array_equal(sd.registry.members(0), sd.registry.members(1))


def test_synth_partial_overlap():
    sd = synth_generate(SynthConfig(n_domains=2, signals=("shared-latent", "pure-noise"), n_users=50, n_items=100,
                                    density=0.05, overlap=0.4))
    shared = set(sd.registry.members(0).tolist()) & set(sd.registry.members(1).tolist())
    assert len(shared) == 20 and sd.registry.n_global == 80


def test_synth_density_band():
    sd = synth_generate(SynthConfig(n_domains=1, signals=("shared-latent",), n_users=100, n_items=200, density=0.05))
    assert 900 <= len(sd.domains[0]) <= 1100


def test_pure_noise_popularity_uniform():
    sd = synth_generate(SynthConfig(n_domains=1, signals=("pure-noise",), n_users=400, n_items=100, density=0.05, seed=5))
    counts = np.bincount(sd.domains[0].items, minlength=100)
    assert stats.chisquare(counts).pvalue > 0.01


def test_synth_unreachable_density_and_bad_config():
    with pytest.raises(DataError):
        synth_generate(SynthConfig(n_domains=1, signals=("pure-noise",), n_users=10, n_items=20, density=0.05))
    with pytest.raises(DataError):
        SynthConfig(overlap=1.5)
    with pytest.raises(DataError):
        SynthConfig(n_domains=2, signals=("shared-latent", "weird"))


def test_synth_deterministic():
    cfg = SynthConfig(n_users=30, n_items=100, density=0.05, seed=9)
    a, b = synth_generate(cfg), synth_generate(cfg)
    assert all(x.triples() == y.triples() for x, y in zip(a.domains, b.domains))
