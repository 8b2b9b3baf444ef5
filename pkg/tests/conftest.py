import pytest

from edgeci.bus import TopicSet, make_inmemory_bus
from edgeci.config import (
    DeviationMode,
    DeviationPolicy,
    FeatureSchema,
    FeatureSpec,
)


@pytest.fixture
def schema2():
    return FeatureSchema(
        features=(
            FeatureSpec("temperature", unit="°C", min=-50.0, max=200.0),
            FeatureSpec("ph", unit="pH", min=0.0, max=14.0),
        ),
        target_name="viscosity",
    )


@pytest.fixture
def schema4():
    return FeatureSchema(
        features=(
            FeatureSpec("fat_content", unit="%fat"),
            FeatureSpec("ph", unit="pH"),
            FeatureSpec("pressure", unit="bar"),
            FeatureSpec("temperature", unit="°C"),
        ),
        target_name="viscosity",
    )


@pytest.fixture
def abs_policy():
    return DeviationPolicy(DeviationMode.ABSOLUTE, 1.5)


@pytest.fixture
def pct_policy():
    return DeviationPolicy(DeviationMode.PERCENTAGE, 0.05)


@pytest.fixture
def topics():
    return TopicSet(input="plant/inputTopic", output="plant/outputTopic",
                    command="plant/commandTopic")


@pytest.fixture
def bus():
    return make_inmemory_bus()
