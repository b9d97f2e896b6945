"""网络工具：端点 URL 校验"""

from __future__ import annotations

from urllib.parse import urlparse

from slideseek.core.exceptions import ConfigError

_ALLOWED_SCHEMES = frozenset(("http", "https"))


def validate_endpoint(url: str, *, context: str = "") -> str:
    """校验模型端点仅使用 http/https 且带主机名，返回去掉尾部斜杠的 URL

    Raises:
        ConfigError: URL 为空、scheme 不在白名单内或缺少主机名
    """
    label = f" ({context})" if context else ""
    if not url:
        raise ConfigError(f"未配置模型端点{label}")
    parsed = urlparse(url)
    if parsed.scheme not in _ALLOWED_SCHEMES:
        raise ConfigError(
            f"不允许的 URL 协议 '{parsed.scheme}'{label}，"
            f"仅支持 http/https: {url}"
        )
    if not parsed.netloc:
        raise ConfigError(f"端点缺少主机名{label}: {url}")
    return url.rstrip("/")
