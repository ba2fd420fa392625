"""extlab: numerical laboratory for extension, square-function and Kakeya
tube inequalities on large grids."""

__version__ = "0.1.0"
