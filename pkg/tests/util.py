"""Shared test fixtures: six hand-written documents and tiny configs.

The fixture documents are frozen by the golden files under
tests/goldens/render/; regenerate with scripts/regen_goldens.py after any
deliberate formatting change and review the diff.
"""

from localm.corpus import Document

FIXTURE_DOCS = [
    Document(
        id="fix-000",
        url="www.united-states-herald.com/2016/election-results-00421",
        country="United States",
        continent="America",
        year=2016,
        title="Election results by county",
        content="Ballots were counted through the night. Officials confirmed the tallies on Friday.",
    ),
    Document(
        id="fix-001",
        url="www.ireland-gazette.com/2019/harvest-report-00007",
        country="Ireland",
        continent="Europe",
        year=2019,
        title="Harvest report: barley and oats",
        content="Yields rose for a third year. The cooperative credited new drainage works.",
    ),
    Document(
        id="fix-002",
        url="www.hong-kong-times.com/2021/ferry-schedule-13579",
        country="Hong Kong",
        continent="Asia",
        year=2021,
        title="Ferry schedule changes take effect",
        content="The morning crossings now leave ten minutes earlier; commuters adjusted quickly.",
    ),
    Document(
        id="fix-003",
        url="www.kenya-post.com/2014/marathon-preview-00088",
        country="Kenya",
        continent="Africa",
        year=2014,
        title="Marathon preview",
        content="Pacemakers were announced at noon. Résumés of the elite field follow below.",
    ),
    Document(
        id="fix-004",
        url="www.sri-lanka-daily.com/2010/tea-auction-00356",
        country="Sri Lanka",
        continent="Asia",
        year=2010,
        title="Tea auction sets a record",
        content="A single lot fetched twice the seasonal average.\nBuyers cited the dry spell upcountry.",
    ),
    Document(
        id="fix-005",
        url="www.canada-tribune.com/2023/rail-upgrade-04242",
        country="Canada",
        continent="America",
        year=2023,
        title="Rail upgrade clears review",
        content="The corridor work starts in spring. Freight operators expect fewer delays after 2024.",
    ),
]
