import numpy as np
import pytest

from fedehr import dataset as D

HEADER = "age,sex,bmi,children,smoker,region,charges,SSN\n"

# ten rows with hand-assigned SSNs
SAMPLE_ROWS = [
    "45,female,25.175,2,no,northeast,9095.06825,999-76-6866",
    "36,female,30.02,0,no,northwest,5272.1758,999-73-5361",
    "64,female,26.885,0,yes,northwest,29330.98315,999-27-3385",
    "46,male,25.745,3,no,northwest,9301.89355,999-85-4926",
    "19,male,31.92,0,yes,northwest,33750.2918,999-60-7372",
    "32,female,20.52,0,no,northeast,4544.2348,999-60-9291",
    "35,female,35.815,1,no,northwest,5630.45785,999-29-3501",
    "44,male,22.135,2,no,northeast,8302.53565,999-60-2184",
    "49,female,23.845,3,yes,northeast,24106.91255,999-48-3257",
    "24,female,23.21,0,no,southeast,25081.76784,999-72-8988",
]


@pytest.fixture
def sample_csv() -> bytes:
    return (HEADER + "\n".join(SAMPLE_ROWS) + "\n").encode()


@pytest.fixture(scope="session")
def insurance_records():
    return D.load_insurance()


@pytest.fixture(scope="session")
def insurance_dataset(insurance_records):
    ssns = D.synthesize_ssns(1, len(insurance_records))
    return D.Dataset.from_records(D.merge_ssn(insurance_records, ssns))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
