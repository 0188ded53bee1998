from setuptools import setup, find_packages

__author__ = 'SceneCompleter developers'
__maintainer__ = 'SceneCompleter developers'

if __name__ == "__main__":
    setup(
        name='SceneCompleter',
        version="0.0.1",
        python_requires='>=3.9',
        author=__author__,
        packages=find_packages(exclude=['examples', 'examples.*']),
        zip_safe=False,
        install_requires=[
            'numpy',
            'scipy',
            'torch',
            'plyfile',
            'imageio',
            'requests',
            'pydantic>=2',
            'sympy',
        ],
        extras_require={
            'video': ['imageio-ffmpeg'],
        },
        entry_points={
            'console_scripts': [
                'scene-completer=scene_completer.cli:main',
            ],
        },
    )
