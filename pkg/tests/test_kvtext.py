import pytest
from hypothesis import given
from hypothesis import strategies as st

from pianodiff import kvtext

scalars = st.one_of(st.booleans(), st.integers(-10**6, 10**6),
                    st.floats(allow_nan=False, allow_infinity=False),
                    st.from_regex(r"[a-z][a-z_\-]{0,8}", fullmatch=True).filter(
                        lambda s: s not in ("true", "false", "on", "off", "yes", "no")))
values = st.one_of(scalars, st.tuples(st.integers(0, 99), st.integers(0, 99), st.integers(0, 99)))


@given(st.dictionaries(st.from_regex(r"[a-z][a-z_.]{0,10}", fullmatch=True), values, max_size=8))
def test_round_trip(d):
    assert kvtext.loads(kvtext.dumps(d)) == d


def test_comments_and_blank_lines():
    assert kvtext.loads("# header\n\na = 1  # trailing\nb=off\n") == {"a": 1, "b": False}


def test_hash_ignores_order():
    assert kvtext.content_hash({"a": 1, "b": 2}) == kvtext.content_hash({"b": 2, "a": 1})
    assert kvtext.content_hash({"a": 1}) != kvtext.content_hash({"a": 2})


def test_malformed_line():
    with pytest.raises(ValueError):
        kvtext.loads("no equals sign here")
