"""Reference data for the Energizer Ultimate Lithium AA (LiFeS2) cell."""

from importlib import resources

from .ecm import CellSpec, OcvPolynomial, SocParameterTable

#: Fitted OCV(SOC) coefficients, highest power first.
LIFES2_OCV_COEFFICIENTS = (2.33, -6.36, 6.62, -3.35, 1.0, 1.35)


def lifes2_aa_cell():
    """3000 mAh, 1.5 V nominal, 0.8 V cutoff, 14.5 mm x 50.5 mm."""
    return CellSpec.from_mah(3000.0, 1.5, 0.8, 1.0, 14.5e-3, 50.5e-3)


def lifes2_ocv():
    return OcvPolynomial(LIFES2_OCV_COEFFICIENTS)


def lifes2_parameter_table():
    """The 20-breakpoint identified parameter table bundled with the package."""
    with resources.files("ecmtherm.data").joinpath("table2.csv").open("r", encoding="utf-8") as fh:
        return SocParameterTable.read_csv(fh)


def reduced_table(table, breakpoints):
    """Resample ``table`` onto ``breakpoints`` by its own interpolation rule."""
    from .ecm import interpolate_columns

    return SocParameterTable.from_matrix(breakpoints, interpolate_columns(table, breakpoints))
