"""Language code -> display name registry.

Ships the FLEURS 102-language table plus reserved synthetic codes
(syn0..syn15) used by the bundled corpus generator. Display names feed
the task prefixes, e.g. "[French Speech]".
"""

from speechdex.errors import RegistryError

FLEURS_LANGUAGES = {
    "af": "Afrikaans", "am": "Amharic", "ar": "Arabic", "hy": "Armenian",
    "as": "Assamese", "ast": "Asturian", "az": "Azerbaijani", "be": "Belarusian",
    "bn": "Bengali", "bs": "Bosnian", "bg": "Bulgarian", "my": "Burmese",
    "yue": "Cantonese", "ca": "Catalan", "ceb": "Cebuano", "hr": "Croatian",
    "cs": "Czech", "da": "Danish", "nl": "Dutch", "en": "English",
    "et": "Estonian", "fil": "Filipino", "fi": "Finnish", "fr": "French",
    "ff": "Fula", "gl": "Galician", "lg": "Ganda", "ka": "Georgian",
    "de": "German", "el": "Greek", "gu": "Gujarati", "ha": "Hausa",
    "he": "Hebrew", "hi": "Hindi", "hu": "Hungarian", "is": "Icelandic",
    "ig": "Igbo", "id": "Indonesian", "ga": "Irish", "it": "Italian",
    "ja": "Japanese", "jv": "Javanese", "kea": "Kabuverdianu", "kam": "Kamba",
    "kn": "Kannada", "kk": "Kazakh", "km": "Khmer", "ko": "Korean",
    "ky": "Kyrgyz", "lo": "Lao", "lv": "Latvian", "ln": "Lingala",
    "lt": "Lithuanian", "luo": "Luo", "lb": "Luxembourgish", "mk": "Macedonian",
    "ms": "Malay", "ml": "Malayalam", "mt": "Maltese", "cmn": "Mandarin",
    "mi": "Maori", "mr": "Marathi", "mn": "Mongolian", "ne": "Nepali",
    "nso": "Northern-Sotho", "nb": "Norwegian", "ny": "Nyanja", "oc": "Occitan",
    "or": "Oriya", "om": "Oromo", "ps": "Pashto", "fa": "Persian",
    "pl": "Polish", "pt": "Portuguese", "pa": "Punjabi", "ro": "Romanian",
    "ru": "Russian", "sr": "Serbian", "sn": "Shona", "sd": "Sindhi",
    "sk": "Slovak", "sl": "Slovenian", "so": "Somali", "ckb": "Sorani-Kurdish",
    "es": "Spanish", "sw": "Swahili", "sv": "Swedish", "tg": "Tajik",
    "ta": "Tamil", "te": "Telugu", "th": "Thai", "tr": "Turkish",
    "uk": "Ukrainian", "umb": "Umbundu", "ur": "Urdu", "uz": "Uzbek",
    "vi": "Vietnamese", "cy": "Welsh", "wo": "Wolof", "xh": "Xhosa",
    "yo": "Yoruba", "zu": "Zulu",
}

SYNTHETIC_LANGUAGES = {f"syn{i}": f"Synth{i}" for i in range(16)}

_REGISTRY = {**FLEURS_LANGUAGES, **SYNTHETIC_LANGUAGES}


def language_name(code: str) -> str:
    """Display name for a language code; raises RegistryError if unknown."""
    try:
        return _REGISTRY[code]
    except KeyError:
        raise RegistryError(f"unknown language code {code!r}") from None


def register_language(code: str, name: str) -> None:
    _REGISTRY[code] = name


def known_languages() -> dict[str, str]:
    return dict(_REGISTRY)
