//! File formats: label CSVs, PNG images, COCO annotations, embedding text
//! files and binary archives.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dsrb_core::backbone::Image;
use dsrb_core::csrl::CategoryEmbeddings;
use dsrb_core::labelspace::LabelMatrix;
use dsrb_core::pprb::PrototypeBank;
use dsrb_core::train::TraceRow;
use image::imageops::FilterType;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Images, their labels and where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledImages {
    pub categories: Vec<String>,
    pub files: Vec<String>,
    pub images: Vec<Image>,
    pub labels: LabelMatrix,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    Ok(())
}

/// Label matrix as CSV: a header `image,<category>...` and one row per image.
pub fn write_labels_csv(path: &Path, categories: &[String], files: &[String], labels: &LabelMatrix) -> Result<()> {
    if categories.len() != labels.categories() || files.len() != labels.rows() {
        return Err(format_err(path, "label matrix does not match names"));
    }
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["image".to_string()];
    header.extend(categories.iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    for (n, file) in files.iter().enumerate() {
        let mut rec = vec![file.clone()];
        rec.extend(labels.row(n).iter().map(|v| format!("{}", *v as i8)));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_labels_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, LabelMatrix)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.get(0) != Some("image") || header.len() < 2 {
        return Err(format_err(path, "expected header `image,<category>...`"));
    }
    let categories: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut files = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        files.push(rec[0].to_string());
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("row {}: bad label `{field}`", i + 1)))?;
            values.push(v);
        }
    }
    let labels = LabelMatrix::from_hard(files.len(), categories.len(), values)?;
    Ok((categories, files, labels))
}

pub fn save_png(path: &Path, image: &Image) -> Result<()> {
    if image.channels != 3 {
        return Err(format_err(path, "only RGB images can be written"));
    }
    create_parent(path)?;
    image::save_buffer(
        path,
        &image.pixels,
        image.width as u32,
        image.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image as RGB, resizing it to `height x width` when needed.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.height() as usize != height || rgb.width() as usize != width {
        rgb = image::imageops::resize(&rgb, width as u32, height as u32, FilterType::Triangle);
    }
    Ok(Image::new(height, width, 3, rgb.into_raw())?)
}

/// Writes `images/<index>.png` and `labels.csv` under `dir`.
pub fn save_image_dir(dir: &Path, categories: &[String], images: &[Image], labels: &LabelMatrix) -> Result<Vec<String>> {
    let files: Vec<String> = (0..images.len()).map(|i| format!("images/{i:06}.png")).collect();
    for (file, img) in files.iter().zip(images) {
        save_png(&dir.join(file), img)?;
    }
    write_labels_csv(&dir.join("labels.csv"), categories, &files, labels)?;
    Ok(files)
}

/// Reads a directory written by [`save_image_dir`] (or laid out the same way).
pub fn load_image_dir(dir: &Path, height: usize, width: usize) -> Result<LabelledImages> {
    let (categories, files, labels) = read_labels_csv(&dir.join("labels.csv"))?;
    let images = files
        .iter()
        .map(|f| load_image(&dir.join(f), height, width))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelledImages {
        categories,
        files,
        images,
        labels,
    })
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Image-level labels from a COCO-style instance annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoLabels {
    /// Category names ordered by id.
    pub categories: Vec<String>,
    pub category_ids: Vec<u64>,
    /// Image file names ordered by id.
    pub files: Vec<String>,
    /// `1` where an image has at least one instance of a category, `-1` elsewhere.
    pub labels: LabelMatrix,
}

pub fn read_coco(path: &Path) -> Result<CocoLabels> {
    let file = File::open(path).map_err(io_err(path))?;
    let coco: CocoFile = serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let cats: BTreeMap<u64, String> = coco.categories.into_iter().map(|c| (c.id, c.name)).collect();
    let imgs: BTreeMap<u64, String> = coco.images.into_iter().map(|i| (i.id, i.file_name)).collect();
    let cat_index: HashMap<u64, usize> = cats.keys().enumerate().map(|(i, &id)| (id, i)).collect();
    let img_index: HashMap<u64, usize> = imgs.keys().enumerate().map(|(i, &id)| (id, i)).collect();
    let c = cats.len();
    let mut values = vec![-1.0; imgs.len() * c];
    for a in &coco.annotations {
        let n = *img_index
            .get(&a.image_id)
            .ok_or_else(|| format_err(path, format!("annotation for unknown image {}", a.image_id)))?;
        let k = *cat_index
            .get(&a.category_id)
            .ok_or_else(|| format_err(path, format!("annotation for unknown category {}", a.category_id)))?;
        values[n * c + k] = 1.0;
    }
    Ok(CocoLabels {
        category_ids: cats.keys().copied().collect(),
        categories: cats.into_values().collect(),
        labels: LabelMatrix::from_hard(imgs.len(), c, values)?,
        files: imgs.into_values().collect(),
    })
}

/// Word vectors in the common text layout: `<name> <v1> <v2> ...` per line.
/// Rows are returned in the order of `categories`; every category must appear.
pub fn read_embeddings(path: &Path, categories: &[String]) -> Result<CategoryEmbeddings> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut found: HashMap<String, Vec<f64>> = HashMap::new();
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let mut parts = line.split_whitespace();
        let Some(name) = parts.next() else { continue };
        let v = parts
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| format_err(path, format!("line {}: bad number", i + 1)))?;
        if *dim.get_or_insert(v.len()) != v.len() {
            return Err(format_err(path, format!("line {}: inconsistent dimension", i + 1)));
        }
        found.insert(name.to_string(), v);
    }
    let dim = dim.ok_or_else(|| format_err(path, "no vectors"))?;
    let mut data = Vec::with_capacity(categories.len() * dim);
    for name in categories {
        let v = found
            .get(name)
            .ok_or_else(|| format_err(path, format!("no vector for category `{name}`")))?;
        data.extend_from_slice(v);
    }
    Ok(CategoryEmbeddings::from_rows(categories.len(), dim, data)?)
}

pub fn save_archive<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let tmp = path.with_extension("partial");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    bincode::serialize_into(&mut w, value).map_err(|source| Error::Archive {
        path: path.to_path_buf(),
        source,
    })?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_archive<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(io_err(path))?;
    bincode::deserialize_from(BufReader::new(file)).map_err(|source| Error::Archive {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_bank(path: &Path, bank: &PrototypeBank) -> Result<()> {
    save_archive(path, bank)
}

pub fn load_bank(path: &Path) -> Result<PrototypeBank> {
    load_archive(path)
}

pub const TRACE_HEADER: &str = "epoch,iteration,l_cls,l_cst,total,mean_alpha,mean_beta,l_clean,l_instance,l_prototype";

fn trace_line(r: &TraceRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.epoch, r.iteration, r.cls, r.cst, r.total, r.mean_alpha, r.mean_beta, r.clean, r.instance, r.prototype
    )
}

/// Appends rows to a loss-trace CSV, writing the header first if the file is new.
pub fn append_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    create_parent(path)?;
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{TRACE_HEADER}").map_err(io_err(path))?;
    }
    for r in rows {
        writeln!(w, "{}", trace_line(r)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        if rec.len() != 10 {
            return Err(format_err(path, format!("row {}: expected 10 fields", i + 1)));
        }
        let f = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| format_err(path, format!("row {}: bad number `{}`", i + 1, &rec[k])))
        };
        rows.push(TraceRow {
            epoch: f(0)? as u32,
            iteration: f(1)? as u64,
            cls: f(2)?,
            cst: f(3)?,
            total: f(4)?,
            mean_alpha: f(5)?,
            mean_beta: f(6)?,
            clean: f(7)?,
            instance: f(8)?,
            prototype: f(9)?,
        });
    }
    Ok(rows)
}

/// Rewrites a trace keeping only rows from epochs up to `epoch`.
pub fn truncate_trace(path: &Path, epoch: u32) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<TraceRow> = read_trace(path)?.into_iter().filter(|r| r.epoch <= epoch).collect();
    fs::remove_file(path).map_err(io_err(path))?;
    append_trace(path, &kept)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: PathBuf::from(path),
        source,
    })
}
