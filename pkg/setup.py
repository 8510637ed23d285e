#!/usr/bin/env python3
"""Setup script for Sprite Story by JOCRIX."""

from setuptools import setup, find_packages
import os

# Read the README file for long description
def read_readme():
    with open("README.md", "r", encoding="utf-8") as fh:
        return fh.read()

# Read requirements from requirements.txt in the package
def read_requirements():
    requirements_path = os.path.join("sprite_story_pkg", "requirements.txt")
    with open(requirements_path, "r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="sprite-story",
    version="0.1.0",
    author="JOCRIX",
    author_email="",
    description="Character-consistent story generation with region-supervised image prompts, trained on synthetic sprites",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
    url="",
    packages=find_packages(exclude=["tests", "tests.*"]),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.9",
    install_requires=read_requirements(),
    extras_require={
        "test": ["pytest>=7.0"],
    },
    entry_points={
        "console_scripts": [
            # Main entry points
            "sprite-story=sprite_story_pkg.cli:main",
            # Alternative entry points
            "spst=sprite_story_pkg.cli:main",
        ],
    },
    include_package_data=True,
    package_data={
        "sprite_story_pkg": ["*.txt"],
    },
    keywords="diffusion perceiver-resampler lora cross-attention sprites storytelling",
)
