from setuptools import setup, find_packages

setup(
    name="fctsbn-engine",
    version="1.0.0",
    description="Factored conditional temporal sigmoid belief networks for multi-style sequence modeling",
    author="FCTSBN Engine Contributors",
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    install_requires=[
        'pandas>=1.5.0',
        'numpy>=1.23.0',
        'scipy>=1.9.0',
        'scikit-learn>=1.2.0',
        'joblib>=1.3.0',
        'tqdm>=4.65.0',
    ],
    entry_points={
        'console_scripts': [
            'fctsbn=engine.cli:main',
        ],
    },
    python_requires='>=3.8',
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
    ],
)
