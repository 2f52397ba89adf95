import os

__location__ = os.path.dirname(__file__)

try:
    from setuptools import setup
except ImportError:
    from distutils.core import setup

setup(
    name='mvlift',
    version='0.1.0',
    packages=['mvlift', 'mvlift.tests'],
    license='MIT',
    description='Lift single-view 2D pose sequences to global 3D motion with multi-view diffusion',
    install_requires=[
        "numpy>=1.20",
        "pandas>=1.1",
        "matplotlib>=3.3",
        "jinja2>=2.8",
        "scipy>=1.6",
        "torch>=1.13"
    ],
    package_data={'mvlift': ['templates/*.html']},
    include_package_data=True,
    entry_points={
        'console_scripts': ['mvlift=mvlift.cli:main'],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'License :: OSI Approved :: MIT License',
        'Environment :: Console',
        'Operating System :: OS Independent',
        'Intended Audience :: Science/Research',
        'Intended Audience :: Developers',
        'Topic :: Scientific/Engineering',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10'

    ],
    keywords='pose-estimation motion-capture diffusion multi-view 3d',

)
