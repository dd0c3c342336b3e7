"""
Setup script for dhr-shadows package
"""

from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="dhr-shadows",
    version="1.0.0",
    description="Distributed hybrid rendering of soft shadows and ambient occlusion over a simulated network",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*"]),
    py_modules=["hybrid_render", "denoise_planes"],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Multimedia :: Graphics :: 3D Rendering",
        "Topic :: System :: Networking",
    ],
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.21",
        "scipy>=1.7",
        "Pillow>=8.0",
        "matplotlib>=3.4",
        "lz4>=3.1",
    ],
    extras_require={
        "test": [
            "pytest>=7.0",
            "hypothesis>=6.0",
            "scikit-image>=0.19",
        ],
    },
    entry_points={
        "console_scripts": [
            "hybrid-render=hybrid_render:main",
            "denoise-planes=denoise_planes:main",
        ],
    },
)
