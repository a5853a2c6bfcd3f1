from setuptools import setup, find_packages

setup(
    name="coupled_stabilization",
    version="0.1",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    python_requires=">=3.10",
    install_requires=["numpy", "scipy>=1.10", "pydantic>=2"],
    extras_require={"tracking": ["torch", "tensorboard"]},
    entry_points={"console_scripts": ["stab=coupled_stabilization.cli:main"]},
)
