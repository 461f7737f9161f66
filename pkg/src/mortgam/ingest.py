"""Parsing of Human Mortality Database 1x1 tables and dataset assembly."""

from dataclasses import dataclass, field

import numpy as np

OPEN_AGE = 110  # HMD's terminal open interval "110+"


class HmdParseError(ValueError):
    """Malformed row or value in an HMD table."""


class HmdStructureError(ValueError):
    """Rows present but not in the expected year/age block layout."""


class AlignmentError(ValueError):
    """Deaths and exposures tables do not share a common grid."""


@dataclass
class HmdTable:
    """Raw 1x1 table: one row per (year, age), female/male/total columns.

    Missing values (printed as ".") are stored as NaN.
    """

    years: np.ndarray
    ages: np.ndarray
    female: np.ndarray
    male: np.ndarray
    total: np.ndarray


@dataclass
class MortalityDataset:
    """Model-ready rectangular deaths/exposures grid for one sex."""

    ages: np.ndarray
    years: np.ndarray
    deaths: np.ndarray     # [age, year]
    exposures: np.ndarray  # [age, year]
    sex: str
    included: np.ndarray = field(default=None)  # bool [age, year]

    def __post_init__(self):
        if self.included is None:
            self.included = np.ones(self.deaths.shape, dtype=bool)
        if self.deaths.shape != self.exposures.shape:
            raise ValueError("deaths and exposures shapes differ")
        if self.deaths.shape != (len(self.ages), len(self.years)):
            raise ValueError("grid shape does not match axes")
        for axis in (self.ages, self.years):
            if len(axis) > 1 and not np.all(np.diff(axis) == 1):
                raise ValueError("axes must be contiguous with step 1")

    def cohorts(self):
        """All birth cohorts (year - age) present in the grid, ascending."""
        lo = int(self.years[0]) - int(self.ages[-1])
        hi = int(self.years[-1]) - int(self.ages[0])
        return np.arange(lo, hi + 1)

    def cohort_of_cell(self):
        """Matrix of cohort values, cohort[a, t] = year_t - age_a."""
        return self.years[None, :] - self.ages[:, None]


@dataclass(frozen=True)
class AxisScaling:
    """Invertible affine maps from raw age/year to standardised covariates.

    Both axes are centred at their grid midpoint and scaled by 10, so one
    unit of standardised time is roughly a decade.
    """

    age_offset: float
    age_scale: float
    time_offset: float
    time_scale: float

    def __post_init__(self):
        if self.age_scale <= 0 or self.time_scale <= 0:
            raise ValueError("scale factors must be positive")

    def age_to_std(self, age):
        return (np.asarray(age, dtype=float) - self.age_offset) / self.age_scale

    def std_to_age(self, x):
        return np.asarray(x, dtype=float) * self.age_scale + self.age_offset

    def year_to_std(self, year):
        return (np.asarray(year, dtype=float) - self.time_offset) / self.time_scale

    def std_to_year(self, t):
        return np.asarray(t, dtype=float) * self.time_scale + self.time_offset


def _parse_value(token):
    if token == ".":
        return np.nan
    try:
        return float(token)
    except ValueError as exc:
        raise HmdParseError(f"unparseable value {token!r}") from exc


def _parse_age(token):
    token = token.rstrip("+")
    try:
        return int(token)
    except ValueError as exc:
        raise HmdParseError(f"unparseable age {token!r}") from exc


def parse_hmd_table(text):
    """Parse an HMD 1x1 deaths or exposures table.

    Expects the usual layout: a description line and a blank line, then a
    column-header row (Year, Age, Female, Male, Total) followed by one row
    per (year, age) with "110+" for the open interval and "." for missing.
    """
    years, ages = [], []
    female, male, total = [], [], []
    in_data = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if not in_data:
            if tokens[0].lower() == "year":
                in_data = True
            continue
        if len(tokens) != 5:
            raise HmdParseError(
                f"line {lineno}: expected 5 columns, found {len(tokens)}")
        try:
            years.append(int(tokens[0]))
        except ValueError as exc:
            raise HmdParseError(
                f"line {lineno}: unparseable year {tokens[0]!r}") from exc
        try:
            ages.append(_parse_age(tokens[1]))
            female.append(_parse_value(tokens[2]))
            male.append(_parse_value(tokens[3]))
            total.append(_parse_value(tokens[4]))
        except HmdParseError as exc:
            raise HmdParseError(f"line {lineno}: {exc}") from exc
    if not years:
        raise HmdParseError("no data rows found")
    table = HmdTable(years=np.array(years), ages=np.array(ages),
                     female=np.array(female), male=np.array(male),
                     total=np.array(total))
    _check_structure(table)
    return table


def _check_structure(table):
    n_ages = OPEN_AGE + 1
    if len(table.years) % n_ages != 0:
        raise HmdStructureError(
            f"row count {len(table.years)} is not a multiple of {n_ages}")
    n_years = len(table.years) // n_ages
    expected_ages = np.tile(np.arange(n_ages), n_years)
    if not np.array_equal(table.ages, expected_ages):
        raise HmdStructureError("age blocks are not 0..110 in order")
    block_years = table.years.reshape(n_years, n_ages)
    if np.any(block_years != block_years[:, :1]):
        raise HmdStructureError("year changes within an age block")
    year_seq = block_years[:, 0]
    if n_years > 1 and not np.all(np.diff(year_seq) == 1):
        raise HmdStructureError("year blocks are not consecutive")


def _table_grid(table, sex):
    """Pivot a parsed table into an [age, year] matrix for one sex."""
    values = {"female": table.female, "male": table.male,
              "total": table.total}[sex]
    n_ages = OPEN_AGE + 1
    n_years = len(table.years) // n_ages
    years = table.years.reshape(n_years, n_ages)[:, 0]
    grid = values.reshape(n_years, n_ages).T
    return np.arange(n_ages), years, grid


def align_dataset(deaths_table, exposures_table, sex, year_range):
    """Assemble a MortalityDataset from parsed deaths and exposures tables.

    ``year_range`` is an inclusive (first, last) pair.  Cells with missing
    values or non-positive exposure are marked excluded rather than
    imputed.
    """
    first, last = year_range
    ages_d, years_d, deaths = _table_grid(deaths_table, sex)
    ages_e, years_e, exposures = _table_grid(exposures_table, sex)
    if not np.array_equal(ages_d, ages_e):
        raise AlignmentError("age grids differ between tables")
    for years in (years_d, years_e):
        if first < years[0] or last > years[-1]:
            raise AlignmentError(
                f"requested years {first}-{last} not covered by "
                f"{years[0]}-{years[-1]}")
    sel_d = (years_d >= first) & (years_d <= last)
    sel_e = (years_e >= first) & (years_e <= last)
    if not np.array_equal(years_d[sel_d], years_e[sel_e]):
        raise AlignmentError("year grids differ between tables")
    deaths = deaths[:, sel_d]
    exposures = exposures[:, sel_e]
    included = (np.isfinite(deaths) & np.isfinite(exposures)
                & (exposures > 0) & (deaths >= 0))
    deaths = np.where(np.isfinite(deaths), deaths, 0.0)
    exposures = np.where(np.isfinite(exposures) & (exposures > 0),
                         exposures, 1.0)
    return MortalityDataset(ages=ages_d, years=years_d[sel_d],
                            deaths=deaths, exposures=exposures,
                            sex=sex, included=included)


def cohort_mask(dataset, n_excluded_oldest):
    """Exclude all cells belonging to the n oldest cohorts in the grid.

    Returns a new dataset; the input is left untouched.
    """
    if n_excluded_oldest < 0:
        raise ValueError("n_excluded_oldest must be non-negative")
    cohorts = dataset.cohorts()
    if n_excluded_oldest > len(cohorts):
        raise ValueError(
            f"cannot exclude {n_excluded_oldest} of {len(cohorts)} cohorts")
    if n_excluded_oldest == 0:
        return dataset
    cutoff = cohorts[n_excluded_oldest - 1]
    cell_cohort = dataset.cohort_of_cell()
    included = dataset.included & (cell_cohort > cutoff)
    return MortalityDataset(ages=dataset.ages, years=dataset.years,
                            deaths=dataset.deaths,
                            exposures=dataset.exposures,
                            sex=dataset.sex, included=included)


def truncate_ages(dataset, age_max):
    """Restrict a dataset to ages 0..age_max (inclusive)."""
    if age_max < dataset.ages[0] or age_max > dataset.ages[-1]:
        raise ValueError(f"age_max {age_max} outside grid "
                         f"{dataset.ages[0]}-{dataset.ages[-1]}")
    keep = dataset.ages <= age_max
    return MortalityDataset(ages=dataset.ages[keep], years=dataset.years,
                            deaths=dataset.deaths[keep],
                            exposures=dataset.exposures[keep],
                            sex=dataset.sex,
                            included=dataset.included[keep])


def standardize_axes(dataset):
    """Midpoint-centred, decade-scaled covariate maps for the dataset."""
    age_mid = (float(dataset.ages[0]) + float(dataset.ages[-1])) / 2.0
    year_mid = (float(dataset.years[0]) + float(dataset.years[-1])) / 2.0
    return AxisScaling(age_offset=age_mid, age_scale=10.0,
                       time_offset=year_mid, time_scale=10.0)


def dataset_to_long_rows(dataset):
    """Long-format rows (sex, age, year, deaths, exposure, included)."""
    rows = []
    for i, age in enumerate(dataset.ages):
        for j, year in enumerate(dataset.years):
            rows.append((dataset.sex, int(age), int(year),
                         float(dataset.deaths[i, j]),
                         float(dataset.exposures[i, j]),
                         bool(dataset.included[i, j])))
    return rows
