"""Configure package installation and distribution."""

from setuptools import find_packages, setup

from emib import __version__


setup(
    name="emib",
    version=__version__,
    description="Eye-masked information-bottleneck pretraining of gaze representations on synthetic faces.",
    long_description=open("README.rst", encoding="utf-8").read(),
    long_description_content_type="text/x-rst",
    author="emib developers",
    license="MIT",
    packages=find_packages(exclude=["contrib", "docs", "*test*"]),
    install_requires=[
        "numpy>=1.21,<3",
        "torch>=1.12,<3",
        "timm>=0.6.12",
        "Pillow>=9.0",
        "pytz>=2020.4",
        "tzlocal>=2.0.0",
    ],
    python_requires=">=3.8",
    entry_points={"console_scripts": ["emib=emib.cli:main"]},
)
