"""slideseek - 多智能体全切片病理探索引擎"""

__version__ = "0.1.0"
