import setuptools
from twostream import __version__

setuptools.setup(
    name="twostream",
    setup_requires=[
        "setuptools>=30.3",
    ],
    test_suite="twostream.unit_tests",
    version=__version__,
)
