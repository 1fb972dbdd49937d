//! COCO-panoptic-format interchange: segment ids encoded into PNG pixels as
//! `id = R + 256*G + 256^2*B`, JSON carrying per-segment records and the
//! category listing. Reading back a written dataset is bit-exact.

use super::synthetic::DatasetItem;
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::inference::{PanopticMap, SegmentInfo};
use crate::maskgen::GroundTruthMasks;
use crate::tensor::ArrD;
use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub fn segment_id_to_rgb(id: u32) -> [u8; 3] {
    [
        (id % 256) as u8,
        ((id / 256) % 256) as u8,
        ((id / 65536) % 256) as u8,
    ]
}

pub fn rgb_to_segment_id(rgb: [u8; 3]) -> u32 {
    rgb[0] as u32 + 256 * rgb[1] as u32 + 65536 * rgb[2] as u32
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CocoSegmentInfo {
    pub id: u32,
    pub category_id: u32,
    pub iscrowd: u8,
    pub area: u64,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CocoAnnotation {
    pub image_id: u64,
    pub file_name: String,
    pub segments_info: Vec<CocoSegmentInfo>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
    pub isthing: u8,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CocoPanopticFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CocoCaption {
    pub image_id: u64,
    pub caption: String,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CocoCaptionsFile {
    pub annotations: Vec<CocoCaption>,
}

fn categories_from_vocab(vocab: &Vocabulary) -> Vec<CocoCategory> {
    (0..vocab.len())
        .map(|k| CocoCategory {
            id: k as u32 + 1,
            name: vocab.name(k).to_string(),
            isthing: u8::from(vocab.is_thing(k)),
        })
        .collect()
}

fn vocab_from_categories(categories: &[CocoCategory]) -> Result<(Vocabulary, BTreeMap<u32, usize>)> {
    let mut sorted = categories.to_vec();
    sorted.sort_by_key(|c| c.id);
    let entries = sorted
        .iter()
        .map(|c| (c.name.clone(), c.isthing != 0))
        .collect();
    let vocab = Vocabulary::new(entries)?;
    let map = sorted
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, i))
        .collect();
    Ok((vocab, map))
}

/// Encode one panoptic map into an id-coded RGB PNG.
pub fn write_panoptic_png(path: &Path, map: &PanopticMap) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let rgb = segment_id_to_rgb(map.segment_ids[[y, x]]);
            let o = (y * w + x) * 3;
            buf[o..o + 3].copy_from_slice(&rgb);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Dataset("png buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Decode an id-coded PNG plus its segment records.
pub fn read_panoptic_png(
    path: &Path,
    segments_info: &[CocoSegmentInfo],
    cat_map: &BTreeMap<u32, usize>,
    vocab: &Vocabulary,
) -> Result<PanopticMap> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut raw_ids = Array2::<u32>::zeros((h, w));
    let mut present = std::collections::BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            let id = rgb_to_segment_id([p[0], p[1], p[2]]);
            raw_ids[[y, x]] = id;
            if id != 0 {
                present.insert(id);
            }
        }
    }
    let known: BTreeMap<u32, &CocoSegmentInfo> =
        segments_info.iter().map(|s| (s.id, s)).collect();
    for id in &present {
        if !known.contains_key(id) {
            return Err(Error::Dataset(format!(
                "segment id {id} in PNG has no segments_info record"
            )));
        }
    }
    // keep the segments_info order, relabel contiguously from 1
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    let mut segments = Vec::new();
    for info in segments_info {
        if !present.contains(&info.id) {
            continue; // record without pixels: dropped
        }
        let category = *cat_map.get(&info.category_id).ok_or_else(|| {
            Error::Dataset(format!("unknown category id {}", info.category_id))
        })?;
        let new_id = segments.len() as u32 + 1;
        remap.insert(info.id, new_id);
        segments.push(SegmentInfo {
            id: new_id,
            category,
            isthing: vocab.is_thing(category),
            score: 1.0,
        });
    }
    let mut ids = Array2::<u32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let raw = raw_ids[[y, x]];
            if raw != 0 {
                ids[[y, x]] = remap[&raw];
            }
        }
    }
    let map = PanopticMap {
        segment_ids: ids,
        segments,
    };
    map.validate()?;
    Ok(map)
}

/// Write panoptic maps (and the category listing) in COCO panoptic layout:
/// `json_path` gets the JSON, `png_dir` one PNG per map.
pub fn write_coco_panoptic(
    json_path: &Path,
    png_dir: &Path,
    maps: &[PanopticMap],
    vocab: &Vocabulary,
) -> Result<()> {
    std::fs::create_dir_all(png_dir)?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        let file_name = format!("{i:06}.png");
        write_panoptic_png(&png_dir.join(&file_name), map)?;
        images.push(CocoImage {
            id: i as u64,
            width: map.width() as u32,
            height: map.height() as u32,
            file_name: file_name.clone(),
        });
        annotations.push(CocoAnnotation {
            image_id: i as u64,
            file_name,
            segments_info: map
                .segments
                .iter()
                .map(|s| CocoSegmentInfo {
                    id: s.id,
                    category_id: s.category as u32 + 1,
                    iscrowd: 0,
                    area: map.area(s.id) as u64,
                })
                .collect(),
        });
    }
    let file = CocoPanopticFile {
        images,
        annotations,
        categories: categories_from_vocab(vocab),
    };
    std::fs::write(json_path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Read panoptic maps written by [`write_coco_panoptic`].
pub fn read_coco_panoptic(
    json_path: &Path,
    png_dir: &Path,
) -> Result<(Vec<PanopticMap>, Vocabulary)> {
    let file: CocoPanopticFile = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    let (vocab, cat_map) = vocab_from_categories(&file.categories)?;
    let mut maps = Vec::new();
    for ann in &file.annotations {
        let map = read_panoptic_png(&png_dir.join(&ann.file_name), &ann.segments_info, &cat_map, &vocab)?;
        maps.push(map);
    }
    Ok((maps, vocab))
}

/// Write a full dataset directory: `images/`, `panoptic/`, `panoptic.json`,
/// `captions.json`.
pub fn write_dataset(dir: &Path, items: &[DatasetItem], vocab: &Vocabulary) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let maps = items
        .iter()
        .map(|it| it.gt_panoptic(vocab))
        .collect::<Result<Vec<_>>>()?;
    write_coco_panoptic(&dir.join("panoptic.json"), &dir.join("panoptic"), &maps, vocab)?;
    let mut captions = Vec::new();
    for (i, item) in items.iter().enumerate() {
        write_image_png(&dir.join("images").join(format!("{i:06}.png")), &item.image)?;
        captions.push(CocoCaption {
            image_id: i as u64,
            caption: item.caption.clone(),
        });
    }
    std::fs::write(
        dir.join("captions.json"),
        serde_json::to_string_pretty(&CocoCaptionsFile {
            annotations: captions,
        })?,
    )?;
    Ok(())
}

/// Read a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Vec<DatasetItem>, Vocabulary)> {
    let (maps, vocab) = read_coco_panoptic(&dir.join("panoptic.json"), &dir.join("panoptic"))?;
    let captions_path = dir.join("captions.json");
    let captions: BTreeMap<u64, String> = if captions_path.exists() {
        let file: CocoCaptionsFile =
            serde_json::from_str(&std::fs::read_to_string(&captions_path)?)?;
        file.annotations
            .into_iter()
            .map(|c| (c.image_id, c.caption))
            .collect()
    } else {
        BTreeMap::new()
    };
    let mut items = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        let image = read_image_png(&dir.join("images").join(format!("{i:06}.png")))?;
        let (h, w) = (map.height(), map.width());
        let mut masks = Vec::new();
        let mut labels = Vec::new();
        for seg in &map.segments {
            let mut m = ArrD::zeros(IxDyn(&[h, w]));
            for y in 0..h {
                for x in 0..w {
                    if map.segment_ids[[y, x]] == seg.id {
                        m[[y, x]] = 1.0;
                    }
                }
            }
            masks.push(m);
            labels.push(seg.category);
        }
        items.push(DatasetItem {
            image,
            panoptic: GroundTruthMasks {
                masks,
                labels: Some(labels.clone()),
            },
            caption: captions.get(&(i as u64)).cloned().unwrap_or_default(),
            labels: Some(labels),
        });
    }
    Ok((items, vocab))
}

/// Save `[3, H, W]` float image (values on the u8 grid) as RGB PNG.
pub fn write_image_png(path: &Path, image: &ArrD) -> Result<()> {
    let sh = image.shape();
    let (h, w) = (sh[1], sh[2]);
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf[(y * w + x) * 3 + c] =
                    (image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Dataset("image buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Load an RGB PNG as `[3, H, W]` with values `n/255`.
pub fn read_image_png(path: &Path) -> Result<ArrD> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrD::zeros(IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = p[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::synthetic::{generate_synthetic_dataset, SyntheticSpec};
    use super::*;

    #[test]
    fn id_rgb_codec_base256() {
        // base-256 arithmetic oracle
        for id in [0u32, 1, 255, 256, 300, 65536, 16_777_215] {
            let rgb = segment_id_to_rgb(id);
            let expect = [
                (id % 256) as u8,
                ((id / 256) % 256) as u8,
                (id / 65536) as u8,
            ];
            assert_eq!(rgb, expect);
            assert_eq!(rgb_to_segment_id(rgb), id);
        }
        assert_eq!(segment_id_to_rgb(300), [44, 1, 0]);
        assert_eq!(segment_id_to_rgb(0), [0, 0, 0]);
    }

    #[test]
    fn panoptic_roundtrip_is_exact() {
        let spec = SyntheticSpec {
            num_images: 3,
            ..Default::default()
        };
        let items = generate_synthetic_dataset(&spec).unwrap();
        let vocab = spec.vocabulary().unwrap();
        let maps: Vec<PanopticMap> = items.iter().map(|i| i.gt_panoptic(&vocab).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("panoptic.json");
        let pngs = dir.path().join("panoptic");
        write_coco_panoptic(&json, &pngs, &maps, &vocab).unwrap();
        let (back, vocab2) = read_coco_panoptic(&json, &pngs).unwrap();
        assert_eq!(vocab2.names(), vocab.names());
        assert_eq!(back.len(), maps.len());
        for (a, b) in maps.iter().zip(back.iter()) {
            assert_eq!(a.segment_ids, b.segment_ids);
            assert_eq!(a.segments.len(), b.segments.len());
            for (sa, sb) in a.segments.iter().zip(b.segments.iter()) {
                assert_eq!(sa.id, sb.id);
                assert_eq!(sa.category, sb.category);
                assert_eq!(sa.isthing, sb.isthing);
            }
        }
    }

    #[test]
    fn dataset_roundtrip_preserves_images_and_captions() {
        let spec = SyntheticSpec {
            num_images: 2,
            ..Default::default()
        };
        let items = generate_synthetic_dataset(&spec).unwrap();
        let vocab = spec.vocabulary().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &items, &vocab).unwrap();
        let (back, vocab2) = read_dataset(dir.path()).unwrap();
        assert_eq!(vocab2.names(), vocab.names());
        for (a, b) in items.iter().zip(back.iter()) {
            assert_eq!(a.image, b.image, "u8-grid images must round-trip exactly");
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.panoptic.num(), b.panoptic.num());
            for (ma, mb) in a.panoptic.masks.iter().zip(b.panoptic.masks.iter()) {
                assert_eq!(ma, mb);
            }
        }
    }

    #[test]
    fn unknown_png_id_is_rejected() {
        let vocab = Vocabulary::new(vec![("square".into(), true)]).unwrap();
        let mut ids = Array2::<u32>::zeros((4, 4));
        ids[[0, 0]] = 1;
        ids[[1, 1]] = 2; // no record for id 2
        let map = PanopticMap {
            segment_ids: ids,
            segments: vec![
                SegmentInfo {
                    id: 1,
                    category: 0,
                    isthing: true,
                    score: 1.0,
                },
                SegmentInfo {
                    id: 2,
                    category: 0,
                    isthing: true,
                    score: 1.0,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("m.png");
        write_panoptic_png(&png, &map).unwrap();
        let infos = vec![CocoSegmentInfo {
            id: 1,
            category_id: 1,
            iscrowd: 0,
            area: 1,
        }];
        let cat_map: BTreeMap<u32, usize> = [(1u32, 0usize)].into_iter().collect();
        let err = read_panoptic_png(&png, &infos, &cat_map, &vocab);
        assert!(err.is_err());
    }

    #[test]
    fn malformed_json_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("panoptic.json");
        std::fs::write(&json, "{ not json").unwrap();
        assert!(read_coco_panoptic(&json, dir.path()).is_err());
    }
}
