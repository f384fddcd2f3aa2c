import pytest

from catts.errors import UnboundPlaceholder
from catts.prompts import PromptTemplate, load_template, render


def test_render_substitutes_all_placeholders():
    text = render(
        load_template("voter"),
        {"question": "What color is the car?", "candidates": "- red\n- blue"},
    )
    assert "What color is the car?" in text
    assert "- red" in text and "- blue" in text
    assert "$" not in text


def test_render_verbatim_without_placeholders():
    template = PromptTemplate(role="voter", text="no placeholders here")
    assert render(template, {}) == "no placeholders here"
    assert render(template, {"unused": "x"}) == "no placeholders here"


def test_render_unbound_placeholder():
    with pytest.raises(UnboundPlaceholder):
        render(load_template("voter"), {"question": "only this"})


def test_render_idempotent_on_rendered_text():
    rendered = render(load_template("planner"), {"question": "Q?"})
    assert render(PromptTemplate("planner", rendered), {}) == rendered


def test_unknown_role():
    with pytest.raises(ValueError):
        load_template("oracle")


@pytest.mark.parametrize(
    "role,variables",
    [
        ("voter", {"question": "How many pencils are on the desk?", "candidates": "- 4\n- 6"}),
        (
            "critic",
            {
                "question": "How many pencils are on the desk?",
                "initial_answer": "4",
                "initial_confidence": "0.500",
            },
        ),
        ("planner", {"question": "How many pencils are on the desk?"}),
    ],
)
def test_golden_renders(role, variables, data_dir):
    rendered = render(load_template(role), variables)
    golden = (data_dir / f"golden_prompt_{role}.txt").read_text("utf-8")
    assert rendered == golden
