/// Configs compiled into the binary, by file name.
pub const BUILTIN_CONFIGS: [(&str, &str); 3] = [
    ("yolo11-detect.cfg", include_str!("../../configs/yolo11-detect.cfg")),
    ("yolov8-ref.cfg", include_str!("../../configs/yolov8-ref.cfg")),
    ("yolo11-cls.cfg", include_str!("../../configs/yolo11-cls.cfg")),
];

/// Looks up a shipped config by file name, with or without the `.cfg` suffix.
pub fn builtin_config(name: &str) -> Option<&'static str> {
    let stem = name.strip_suffix(".cfg").unwrap_or(name);
    BUILTIN_CONFIGS
        .iter()
        .find(|(file, _)| file.strip_suffix(".cfg") == Some(stem))
        .map(|(_, text)| *text)
}
