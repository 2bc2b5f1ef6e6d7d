import sys
from pathlib import Path

import pytest

from adaptljp.corpus import (
    Case,
    DefendantJudgment,
    IntervalScheme,
    LabelPool,
    TermValue,
)

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def golden_dir():
    return GOLDEN


@pytest.fixture
def scheme():
    return IntervalScheme.default()


@pytest.fixture
def small_pool():
    return LabelPool(
        charges=("theft", "robbery", "fraud", "bribery"),
        articles={
            264: "Whoever steals a relatively large amount of property is guilty of theft.",
            263: "Whoever robs property by violence or coercion is guilty of robbery.",
            266: "Whoever obtains property by fabricating facts is guilty of fraud.",
            385: "A state functionary who accepts property for benefits is guilty of bribery.",
        },
    )


def make_case(case_id="c1", fact="Zhang stole a bicycle from the yard.",
              name="Zhang", charges=("theft",), articles=(264,),
              term=TermValue.of_months(8)):
    return Case(
        case_id=case_id,
        fact=fact,
        defendants=(
            DefendantJudgment(
                name=name,
                charges=frozenset(charges),
                articles=frozenset(articles),
                term=term,
            ),
        ),
    )


@pytest.fixture
def simple_case():
    return make_case()
