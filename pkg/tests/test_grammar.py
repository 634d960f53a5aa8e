"""Grammar oracles: frozen byte layouts, round trips, and rejection checks."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factrail.grammar import (
    CitationList,
    CitationSyntaxError,
    DuplicateJudgmentError,
    EmptyIntentSetError,
    EmptyRetrievalError,
    GrammarError,
    IntentSet,
    LocatorJudgment,
    LocatorSyntaxError,
    MismatchedEndError,
    OrderViolationError,
    Relevance,
    StepKind,
    TokenKind,
    TrailingGarbageError,
    Trajectory,
    TrajectoryInvariantError,
    TrajectoryStep,
    UnclosedHeadError,
    format_judgment,
    parse_citations,
    parse_intents,
    parse_locator_body,
    parse_retrieval_body,
    parse_trajectory,
    render_instruction,
    render_retrieval_block,
    retrieval_body,
    serialize_trajectory,
    strip_instruction_end,
    trajectory_from_dict,
    trajectory_to_dict,
)

from helpers import mutate_serialized, random_trajectory


class FakePassage:
    def __init__(self, title, text):
        self.title = title
        self.text = text


def test_token_surfaces_are_frozen():
    assert TokenKind.INSTRUCTION_END.value == "</eoi>"
    assert TokenKind.RECONSTRUCTOR_HEAD.value == "<Reconstructor>"
    assert TokenKind.RECONSTRUCTOR_END.value == "</eor>"
    assert TokenKind.RETRIEVAL_HEAD.value == "<retrieval>"
    assert TokenKind.RETRIEVAL_END.value == "</retrieval>"
    assert TokenKind.LOCATOR_HEAD.value == "<Locator>"
    assert TokenKind.LOCATOR_END.value == "</eol>"
    assert TokenKind.GENERATOR_HEAD.value == "<Generator>"
    assert TokenKind.GENERATOR_END.value == "</eog>"


def test_serialize_single_generator_step():
    t = Trajectory((TrajectoryStep(StepKind.GENERATOR, "Yi Yi\n[Cite]: [2] [6]"),))
    assert serialize_trajectory(t) == "<Generator>\nYi Yi\n[Cite]: [2] [6]\n</eog>\n"


def test_serialize_requires_generator():
    with pytest.raises(TrajectoryInvariantError):
        serialize_trajectory(Trajectory(()))
    with pytest.raises(TrajectoryInvariantError):
        serialize_trajectory(
            Trajectory((TrajectoryStep(StepKind.RECONSTRUCTOR, "Search(x)"),))
        )


def test_serialize_rejects_out_of_order_steps():
    t = Trajectory(
        (
            TrajectoryStep(StepKind.GENERATOR, "y"),
            TrajectoryStep(StepKind.LOCATOR, "[Relevant]: [1] f"),
        )
    )
    with pytest.raises(TrajectoryInvariantError) as err:
        serialize_trajectory(t)
    assert err.value.step_index == 1


def test_serialize_rejects_nested_tokens():
    t = Trajectory((TrajectoryStep(StepKind.GENERATOR, "bad </eor> body"),))
    with pytest.raises(TrajectoryInvariantError):
        serialize_trajectory(t)


def test_parse_lone_reconstructor_section():
    t = parse_trajectory("<Reconstructor>\nSearch(Key figures in the War of 1812)\n</eor>\n")
    assert len(t.steps) == 1
    assert t.steps[0].kind is StepKind.RECONSTRUCTOR
    assert t.steps[0].body == "Search(Key figures in the War of 1812)"


def test_parse_mismatched_end():
    with pytest.raises(MismatchedEndError) as err:
        parse_trajectory("<Locator>\nx\n</eog>\n")
    assert err.value.expected is TokenKind.LOCATOR_END
    assert err.value.found is TokenKind.GENERATOR_END


def test_parse_locates_unclosed_head():
    with pytest.raises(UnclosedHeadError) as err:
        parse_trajectory("<Generator>\nno end")
    assert err.value.kind is StepKind.GENERATOR
    assert err.value.offset == 0


def test_parse_rejects_order_violation():
    text = "<Generator>\ny\n</eog>\n<Locator>\n[Relevant]: [1] f\n</eol>\n"
    with pytest.raises(OrderViolationError):
        parse_trajectory(text)


def test_parse_rejects_stray_text():
    with pytest.raises(TrailingGarbageError) as err:
        parse_trajectory("<Generator>\ny\n</eog>\njunk")
    assert err.value.offset == 21


def test_parse_tolerates_surrounding_whitespace():
    t = parse_trajectory("\n  <Generator>\ny\n</eog>\n\n  ")
    assert t.steps[0].body == "y"


def test_bodies_keep_interior_whitespace():
    t = Trajectory((TrajectoryStep(StepKind.GENERATOR, " two  words \nsecond line"),))
    assert parse_trajectory(serialize_trajectory(t)) == t


def test_round_trip_seeded_sample():
    rng = random.Random(7)
    for _ in range(200):
        t = random_trajectory(rng)
        assert parse_trajectory(serialize_trajectory(t)) == t


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_round_trip_property(data):
    body = st.text(
        alphabet="ab <>/[]().!?\n-",
        max_size=40,
    ).filter(lambda s: not any(tok.value in s for tok in TokenKind))
    optional = data.draw(
        st.sets(
            st.sampled_from(
                [StepKind.RECONSTRUCTOR, StepKind.RETRIEVAL, StepKind.LOCATOR]
            )
        )
    )
    kinds = sorted(optional, key=lambda k: k.rank) + [StepKind.GENERATOR]
    t = Trajectory(tuple(TrajectoryStep(k, data.draw(body)) for k in kinds))
    assert parse_trajectory(serialize_trajectory(t)) == t


def test_mutations_are_rejected_seeded_sample():
    rng = random.Random(11)
    for _ in range(200):
        t = random_trajectory(rng)
        corrupted = mutate_serialized(rng, serialize_trajectory(t))
        with pytest.raises(GrammarError):
            parse_trajectory(corrupted)


# ---------------------------------------------------------------------------
# intents


def test_parse_intents_splits_and_unwraps():
    assert parse_intents("Search(a; b)").intents == ("a", "b")
    assert parse_intents("Search(x)").intents == ("x",)
    assert parse_intents("plain query").intents == ("plain query",)
    assert parse_intents("Search(a); Search(b)").intents == ("a", "b")


def test_parse_intents_drops_blanks_and_errors_when_empty():
    assert parse_intents("a;;b;").intents == ("a", "b")
    with pytest.raises(EmptyIntentSetError):
        parse_intents(" ; ;")
    with pytest.raises(EmptyIntentSetError):
        parse_intents("Search()")


def test_intent_set_m_counts():
    s = IntentSet(("a", "b", "c"))
    assert s.m == 3
    with pytest.raises(EmptyIntentSetError):
        IntentSet(())


# ---------------------------------------------------------------------------
# locator judgments


def test_parse_locator_body_both_kinds():
    body = "[Relevant]: [1] A fact.\n[Irrelevant]: [3] Lacking Supporting Facts."
    one, three = parse_locator_body(body)
    assert one == LocatorJudgment(1, Relevance.RELEVANT, "A fact.")
    assert three == LocatorJudgment(3, Relevance.IRRELEVANT, None)


def test_parse_locator_body_accepts_compact_colon():
    judgments = parse_locator_body("[Relevant]:[2] tight spacing fact")
    assert judgments[0].passage_index == 2
    assert judgments[0].fact == "tight spacing fact"


def test_parse_locator_rejects_relevant_without_fact():
    with pytest.raises(LocatorSyntaxError) as err:
        parse_locator_body("[Relevant]: [1]")
    assert err.value.line == 1


def test_parse_locator_rejects_duplicates():
    body = "[Relevant]: [2] f\n[Irrelevant]: [2] Lacking Supporting Facts."
    with pytest.raises(DuplicateJudgmentError) as err:
        parse_locator_body(body)
    assert err.value.passage_index == 2


def test_parse_locator_rejects_garbage_line():
    with pytest.raises(LocatorSyntaxError) as err:
        parse_locator_body("[Relevant]: [1] ok\nnot a judgment")
    assert err.value.line == 2


def test_format_judgment_round_trip():
    judgments = [
        LocatorJudgment(1, Relevance.RELEVANT, "water is wet"),
        LocatorJudgment(2, Relevance.IRRELEVANT, None),
    ]
    body = "\n".join(format_judgment(j) for j in judgments)
    assert parse_locator_body(body) == judgments


def test_judgment_invariant():
    with pytest.raises(ValueError):
        LocatorJudgment(1, Relevance.RELEVANT, None)
    with pytest.raises(ValueError):
        LocatorJudgment(1, Relevance.IRRELEVANT, "fact")


# ---------------------------------------------------------------------------
# citations


def test_parse_citations_final_line():
    answer, citations = parse_citations("B: food\n[Cite]: [1] [2]")
    assert answer == "B: food"
    assert citations.indices == (1, 2)


def test_parse_citations_inline():
    answer, citations = parse_citations("B: food [Cite]: [1] [2]")
    assert answer == "B: food"
    assert citations.indices == (1, 2)


def test_parse_citations_absent():
    answer, citations = parse_citations("no citations here")
    assert answer == "no citations here"
    assert citations.indices == ()


def test_parse_citations_rejects_empty_and_disorder():
    with pytest.raises(CitationSyntaxError):
        parse_citations("x\n[Cite]: []")
    with pytest.raises(CitationSyntaxError):
        parse_citations("x\n[Cite]: [2] [1]")
    with pytest.raises(CitationSyntaxError):
        parse_citations("x\n[Cite]: [1] oops")


def test_citation_list_invariant():
    with pytest.raises(ValueError):
        CitationList((0,))
    with pytest.raises(ValueError):
        CitationList((1, 1))
    assert CitationList((1, 2, 6)).render() == "[Cite]: [1] [2] [6]"


# ---------------------------------------------------------------------------
# retrieval block


def test_render_retrieval_block_layout():
    block = render_retrieval_block([FakePassage("T", "a b")])
    assert block == "<retrieval>\n[1] T -a b\n</retrieval>\n"


def test_render_retrieval_block_rejects_empty():
    with pytest.raises(EmptyRetrievalError):
        render_retrieval_block([])


def test_retrieval_body_round_trip():
    passages = [FakePassage("Alpha", "first text"), FakePassage("Beta (b)", "second text")]
    entries = parse_retrieval_body(retrieval_body(passages))
    assert entries == [("Alpha", "first text"), ("Beta (b)", "second text")]


# ---------------------------------------------------------------------------
# framing and JSON mirror


def test_render_instruction_and_strip():
    framed = render_instruction("why?")
    assert framed == "why?</eoi>\n"
    assert strip_instruction_end(framed) == "why?"
    assert strip_instruction_end("no marker") == "no marker"


def test_trajectory_dict_mirror():
    t = Trajectory(
        (
            TrajectoryStep(StepKind.RECONSTRUCTOR, "Search(q)"),
            TrajectoryStep(StepKind.GENERATOR, "y"),
        )
    )
    mirrored = trajectory_from_dict(trajectory_to_dict(t))
    assert mirrored == t
    assert trajectory_to_dict(t)["steps"][0] == {"kind": "reconstructor", "body": "Search(q)"}
