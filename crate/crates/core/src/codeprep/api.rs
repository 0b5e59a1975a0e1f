use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};

/// Common C standard-library functions treated as known APIs: they anchor
/// `api_call` slices and are never renamed.
pub const DEFAULT_API_FUNCTIONS: &[&str] = &[
    "alloca",
    "atoi",
    "atol",
    "calloc",
    "fclose",
    "fgetc",
    "fgets",
    "fopen",
    "fprintf",
    "fputs",
    "fread",
    "free",
    "fscanf",
    "fwrite",
    "getc",
    "getchar",
    "getenv",
    "gets",
    "malloc",
    "memchr",
    "memcmp",
    "memcpy",
    "memmove",
    "memset",
    "open",
    "printf",
    "putchar",
    "puts",
    "read",
    "realloc",
    "recv",
    "scanf",
    "snprintf",
    "sprintf",
    "sscanf",
    "strcat",
    "strchr",
    "strcmp",
    "strcpy",
    "strcspn",
    "strdup",
    "strlen",
    "strncat",
    "strncmp",
    "strncpy",
    "strndup",
    "strrchr",
    "strstr",
    "strtok",
    "strtol",
    "strtoul",
    "system",
    "vsnprintf",
    "vsprintf",
    "wcscat",
    "wcscpy",
    "wcslen",
    "wcsncpy",
    "write",
    "exit",
];

/// Standard names that are not functions but should survive identifier
/// renaming.
const BUILTIN_NAMES: &[&str] = &[
    "NULL",
    "EOF",
    "FILE",
    "size_t",
    "ssize_t",
    "ptrdiff_t",
    "int8_t",
    "int16_t",
    "int32_t",
    "int64_t",
    "uint8_t",
    "uint16_t",
    "uint32_t",
    "uint64_t",
    "wchar_t",
    "stdin",
    "stdout",
    "stderr",
    "main",
    "std",
    "string",
    "String",
    "System",
    "out",
    "println",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiList {
    names: BTreeSet<String>,
}

impl Default for ApiList {
    fn default() -> Self {
        ApiList::from_names(DEFAULT_API_FUNCTIONS.iter().map(|s| s.to_string()))
    }
}

impl ApiList {
    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        ApiList {
            names: names.into_iter().filter(|n| !n.is_empty()).collect(),
        }
    }

    pub fn empty() -> Self {
        ApiList { names: BTreeSet::new() }
    }

    /// Parses the API list file format: one name per line, `#` starts a
    /// comment, blank lines ignored.
    pub fn parse(text: &str) -> Self {
        ApiList::from_names(text.lines().filter_map(|line| {
            let line = line.split('#').next().unwrap_or("").trim();
            (!line.is_empty()).then(|| line.to_string())
        }))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    /// Whether identifier renaming must leave `name` untouched.
    pub fn is_known(&self, name: &str) -> bool {
        self.contains(name) || BUILTIN_NAMES.contains(&name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}
