import csv
import io
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsakt import datastore as ds


# -- ingestion ---------------------------------------------------------------


def test_parse_groups_one_user():
    text = "user_id,exercise_id,correct,timestamp\nu,a,0,1\nu,b,1,2\nu,a,1,3\n"
    res = ds.parse_interaction_log(text)
    assert len(res.sequences) == 1
    seq = res.sequences[0]
    assert len(seq) == 3
    assert list(seq.corrects) == [0, 1, 1]
    assert list(seq.exercises) == [1, 2, 1]
    assert res.vocabulary.e == 2


def test_parse_drops_single_interaction_users():
    text = "user_id,exercise_id,correct,timestamp\nu,a,0,1\nu,b,1,2\nv,a,1,1\n"
    res = ds.parse_interaction_log(text)
    assert [s.user_id for s in res.sequences] == ["u"]
    assert res.skipped_users == 1


def test_parse_sorts_stably_by_timestamp():
    text = (
        "user_id,exercise_id,correct,timestamp\n"
        "u,c,1,30\nu,a,0,10\nu,b,1,10\nu,d,0,5\n"
    )
    seq = ds.parse_interaction_log(text).sequences[0]
    vocab = ds.parse_interaction_log(text).vocabulary
    assert [vocab.exercise_id(i) for i in seq.exercises] == ["d", "a", "b", "c"]
    assert list(seq.rows) == [3, 1, 2, 0]


def test_parse_without_timestamp_keeps_file_order():
    text = "user_id,exercise_id,correct\nu,b,1\nu,a,0\n"
    res = ds.parse_interaction_log(text)
    assert list(res.sequences[0].exercises) == [1, 2]


@pytest.mark.parametrize(
    "body,row",
    [
        ("u,a,0,1\nu,b,2,2\n", 3),
        ("u,a,0,1\nu,b,1\n", 3),
        ("u,a,yes,1\n", 2),
        ("u,a,1,1\nu,a,1,soon\n", 3),
    ],
)
def test_parse_rejects_malformed_rows_with_row_number(body, row):
    with pytest.raises(ds.LogFormatError) as info:
        ds.parse_interaction_log("user_id,exercise_id,correct,timestamp\n" + body)
    assert info.value.row == row
    assert f"row {row}" in str(info.value)


def test_parse_empty_inputs():
    with pytest.raises(ds.LogFormatError, match="empty"):
        ds.parse_interaction_log("")
    with pytest.raises(ds.LogFormatError, match="no interaction"):
        ds.parse_interaction_log("user_id,exercise_id,correct,timestamp\n")
    with pytest.raises(ds.LogFormatError, match="lacks"):
        ds.parse_interaction_log("user,exercise,correct\nu,a,1\n")


def test_parse_fixed_vocabulary_rejects_unknown():
    vocab = ds.Vocabulary(["a", "b"])
    text = "user_id,exercise_id,correct,timestamp\nu,b,0,1\nu,a,1,2\n"
    res = ds.parse_interaction_log(text, vocabulary=vocab)
    assert list(res.sequences[0].exercises) == [2, 1]
    with pytest.raises(ds.LogFormatError, match="'z'"):
        ds.parse_interaction_log(text + "u,z,1,3\n", vocabulary=vocab)


ASSIST_SAMPLE = """order_id,assignment_id,user_id,assistment_id,problem_id,original,correct,attempt_count,skill_id,skill_name
33022537,277618,64525,33139,51424,1,1,1,10,"Box and Whisker"
33022709,277618,64525,33150,51435,1,1,1,10,"Box and Whisker"
35450204,220674,70363,33159,51444,1,0,2,,
35450295,220674,70363,33110,51395,1,1,1,10,"Box and Whisker"
35450311,220674,70363,33196,51481,1,0,3,11,"Circle Graph"
35450555,220674,70363,33163,51448,1,1,1,13,"Equation Solving, Two or Fewer Steps"
35450573,220674,70363,33197,51482,1,0,1,11,"Circle Graph"
35480686,220674,70677,33159,51444,1,0,1,,
35480704,220674,70677,33182,51467,1,1,1,13,"Equation Solving, Two or Fewer Steps"
35480707,220674,70677,33120,51405,1,0,1,277,"Histogram as Table or Graph"
"""


def test_assist_adapter_uses_distinct_non_null_skills():
    rows = list(csv.DictReader(io.StringIO(ASSIST_SAMPLE)))
    expected = len({r["skill_id"] for r in rows if r["skill_id"]})
    res = ds.parse_interaction_log(ASSIST_SAMPLE, ds.FORMATS["assist"])
    assert res.vocabulary.e == expected == 4
    assert sum(len(s) for s in res.sequences) == 8
    res = ds.parse_interaction_log(ASSIST_SAMPLE, ds.FORMATS["assist-problem"])
    assert res.vocabulary.e == len({r["problem_id"] for r in rows})


def test_write_then_parse_round_trip():
    seqs, _, _ = ds.generate_synthetic(ds.reference_skill_model(), 5, 7, seed=3)
    buf = io.StringIO()
    ds.write_interaction_log(seqs, ds.synthetic_vocabulary(ds.reference_skill_model()), buf)
    res = ds.parse_interaction_log(buf.getvalue())
    assert res.n_rows == 35
    assert [list(s.corrects) for s in res.sequences] == [list(s.corrects) for s in seqs]


# -- encoding ----------------------------------------------------------------


def test_encode_examples():
    assert ds.encode_interaction(5, 1, 188) == 193
    assert ds.encode_interaction(5, 0, 188) == 5
    tokens = {ds.encode_interaction(E, r, 4) for E in range(1, 5) for r in (0, 1)}
    assert tokens == set(range(1, 9))


def test_encode_rejects_out_of_range():
    with pytest.raises(ValueError):
        ds.encode_interaction(0, 1, 4)
    with pytest.raises(ValueError):
        ds.encode_interaction(5, 0, 4)
    with pytest.raises(ValueError):
        ds.encode_interaction(2, 2, 4)


@given(st.integers(1, 500).flatmap(lambda e: st.tuples(st.just(e), st.integers(1, e), st.integers(0, 1))))
def test_encode_decode_round_trip(args):
    e, E, r = args
    tok = ds.encode_interaction(E, r, e)
    assert 1 <= tok <= 2 * e
    assert ds.decode_interaction(tok, e) == (E, r)


# -- windowing ---------------------------------------------------------------


def test_window_hand_example():
    seq = ds.UserSequence("u", [1, 2, 3], [0, 1, 1])
    (w,) = ds.window_user(seq, k=2, e=3)
    assert list(w.interaction_tokens) == [1, 5]
    assert list(w.query_tokens) == [2, 3]
    assert list(w.targets) == [1, 1]
    assert list(w.valid_mask) == [1, 1]


def test_window_two_interactions_pads():
    (w,) = ds.window_user(ds.UserSequence("u", [1, 2], [1, 0]), k=2, e=3)
    assert list(w.valid_mask) == [1, 0]
    assert list(w.interaction_tokens) == [4, 0]
    assert list(w.query_tokens) == [2, 0]


def test_window_length_101():
    rng = np.random.default_rng(0)
    L = 101
    seq = ds.UserSequence("u", rng.integers(1, 11, L), rng.integers(0, 2, L))
    wins = ds.window_user(seq, k=50, e=10)
    assert len(wins) == 2
    assert wins[1].n_valid == 50
    # second window: inputs are interactions 51..100, targets 52..101 (1-based)
    np.testing.assert_array_equal(wins[1].targets, seq.corrects[51:101])
    np.testing.assert_array_equal(
        wins[1].interaction_tokens, ds.encode_interaction(seq.exercises[50:100], seq.corrects[50:100], 10)
    )


@given(
    st.integers(2, 60),
    st.integers(1, 12),
    st.integers(1, 9),
    st.integers(0, 2**32 - 1),
)
def test_window_invariants(L, k, e, seed):
    rng = np.random.default_rng(seed)
    seq = ds.UserSequence("u", rng.integers(1, e + 1, L), rng.integers(0, 2, L))
    wins = ds.window_user(seq, k, e)
    assert sum(w.n_valid for w in wins) == L - 1
    flat_in, flat_q = [], []
    for w in wins:
        pad = w.valid_mask == 0
        assert np.array_equal(w.interaction_tokens == 0, pad)
        assert np.array_equal(w.query_tokens == 0, pad)
        v = ~pad
        assert v[: w.n_valid].all()  # right padding
        ex, r = ds.decode_interaction(w.interaction_tokens[v], e)
        flat_in += list(zip(ex, r))
        flat_q += list(zip(w.query_tokens[v], w.targets[v]))
    # interaction t is followed chronologically by query t
    assert flat_in == list(zip(seq.exercises[:-1], seq.corrects[:-1]))
    assert flat_q == list(zip(seq.exercises[1:], seq.corrects[1:]))


# -- splitting ---------------------------------------------------------------


def _users(n):
    return [ds.UserSequence(f"u{i}", [1, 1], [0, 1]) for i in range(n)]


def test_split_cardinality_and_disjoint():
    train, test = ds.split_dataset(_users(10), 0.8, seed=1)
    assert len(train) == 8 and len(test) == 2
    assert not {s.user_id for s in train} & {s.user_id for s in test}


def test_split_deterministic():
    a = ds.split_dataset(_users(10), 0.8, seed=5)
    b = ds.split_dataset(_users(10), 0.8, seed=5)
    assert [s.user_id for s in a[0]] == [s.user_id for s in b[0]]


def test_split_table_one_user_count():
    train, test = ds.split_dataset(_users(5816), 0.8, seed=0)
    assert len(train) == 4653 and len(test) == 1163


def test_split_errors():
    with pytest.raises(ValueError):
        ds.split_dataset(_users(1), 0.8, seed=0)
    with pytest.raises(ValueError):
        ds.split_dataset(_users(5), 1.0, seed=0)


# -- synthetic students ------------------------------------------------------


def _brute_force_predictive(p_init, p_learn, p_slip, p_guess, corrects):
    """P(r_t = 1 | r_<t) for one skill by enumerating every mastery path."""
    n = len(corrects)

    def joint(prefix):
        total = 0.0
        for path in itertools.product((0, 1), repeat=len(prefix)):
            pr = p_init if path[0] else 1 - p_init
            ok = True
            for t in range(1, len(path)):
                if path[t - 1] == 1:
                    if path[t] == 0:
                        ok = False
                        break
                else:
                    pr *= p_learn if path[t] else 1 - p_learn
            if not ok:
                continue
            for t, r in enumerate(prefix):
                pc = 1 - p_slip if path[t] else p_guess
                pr *= pc if r else 1 - pc
            total += pr
        return total

    out = []
    for t in range(n):
        prev = list(corrects[:t])
        out.append(joint(prev + [1]) / (joint(prev) if prev else 1.0))
    return np.array(out)


@pytest.mark.parametrize("seed", range(4))
def test_bkt_filter_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    params = dict(p_init=0.4, p_learn=0.3, p_slip=0.1, p_guess=0.2)
    if seed:
        params = dict(
            p_init=rng.uniform(0, 1), p_learn=rng.uniform(0, 1),
            p_slip=rng.uniform(0, 0.4), p_guess=rng.uniform(0, 0.4),
        )
    model = ds.SyntheticSkillModel(**params, skill_exercises=[[1]])
    corrects = rng.integers(0, 2, size=7)
    got = ds.bkt_filter(model, np.zeros(7, dtype=int), corrects)
    np.testing.assert_allclose(got, _brute_force_predictive(**params, corrects=corrects), rtol=1e-12)


def test_bkt_first_step_value():
    model = ds.SyntheticSkillModel(0.4, 0.3, 0.1, 0.2, [[1]])
    probs = ds.bkt_filter(model, [0], [1])
    assert probs[0] == pytest.approx(0.4 * 0.9 + 0.6 * 0.2) == pytest.approx(0.48)


def test_synthetic_degenerate_mastered():
    model = ds.SyntheticSkillModel.uniform(3, 2, 1.0, 0.5, 0.0, 0.2)
    seqs, oracle, _ = ds.generate_synthetic(model, 4, 20, seed=0)
    assert all(s.corrects.all() for s in seqs)
    assert all(np.all(o == 1.0) for o in oracle)


def test_synthetic_frozen_unmastered_is_bernoulli():
    model = ds.SyntheticSkillModel.uniform(2, 3, 0.0, 0.0, 0.1, 0.2)
    seqs, oracle, _ = ds.generate_synthetic(model, 200, 50, seed=1)
    assert all(np.all(o == 0.2) for o in oracle)
    rate = np.mean([s.corrects.mean() for s in seqs])
    assert abs(rate - 0.2) < 0.02  # 10^4 draws, sd 0.004


def test_synthetic_deterministic_and_seed_sensitive():
    model = ds.reference_skill_model()
    a = ds.generate_synthetic(model, 5, 30, seed=9)
    b = ds.generate_synthetic(model, 5, 30, seed=9)
    c = ds.generate_synthetic(model, 5, 30, seed=10)
    assert all(np.array_equal(x.corrects, y.corrects) for x, y in zip(a[0], b[0]))
    assert any(not np.array_equal(x.corrects, y.corrects) for x, y in zip(a[0], c[0]))


def test_synthetic_exercises_belong_to_sampled_skill():
    model = ds.reference_skill_model()
    seqs, _, skills = ds.generate_synthetic(model, 10, 40, seed=2)
    for s, sk in zip(seqs, skills):
        assert np.all((s.exercises - 1) // 2 == sk)


def test_oracle_probabilities_bounded():
    model = ds.SyntheticSkillModel(
        [0.2, 0.6], [0.1, 0.4], [0.05, 0.2], [0.1, 0.3], [[1, 2], [3]]
    )
    _, oracle, _ = ds.generate_synthetic(model, 50, 40, seed=4)
    allp = np.concatenate(oracle)
    assert allp.min() >= model.p_guess.min() - 1e-12
    assert allp.max() <= (1 - model.p_slip).max() + 1e-12


def test_skill_model_validation():
    with pytest.raises(ValueError):
        ds.SyntheticSkillModel(0.5, 0.1, 0.5, 0.6, [[1]])
    with pytest.raises(ValueError):
        ds.SyntheticSkillModel(1.5, 0.1, 0.1, 0.2, [[1]])
